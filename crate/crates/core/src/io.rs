//! File formats: input CSVs, level-map exports, predictions and the binary
//! tensor bundle written by `ingest`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use chrono::{DateTime, NaiveDate, NaiveDateTime};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{HintError, Result};
use crate::grid::{EventRecord, GridSpec, PoiRecord, RoadMask, RoadSegment};
use crate::partition::LevelMap;

/// One row of `stations.csv` (long format).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationRecord {
    pub station_id: String,
    pub lat: f64,
    pub lon: f64,
    pub date: NaiveDate,
    pub channel: String,
    pub value: f64,
}

fn path_str(path: &Path) -> String {
    path.display().to_string()
}

fn csv_err(path: &Path, e: csv::Error) -> HintError {
    HintError::Csv { path: path_str(path), source: e }
}

fn reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))
}

fn writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut rdr = reader(path)?;
    rdr.deserialize().map(|r| r.map_err(|e| csv_err(path, e))).collect()
}

fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HintError::io(path, e))
}

/// Accepts `YYYY-MM-DDTHH:MM:SS[.f]`, the same with a space, RFC 3339 with an
/// offset (converted to UTC), or a bare date (midnight).
pub fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(t);
        }
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(t.naive_utc());
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0))
}

#[derive(Deserialize)]
struct RawEvent {
    timestamp: String,
    lat: f64,
    lon: f64,
}

pub fn read_accidents(path: &Path) -> Result<Vec<EventRecord>> {
    let raw: Vec<RawEvent> = read_rows(path)?;
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let timestamp = parse_timestamp(&r.timestamp).ok_or_else(|| {
                HintError::InvalidInput(format!("{}: record {}: bad timestamp {:?}", path_str(path), i + 1, r.timestamp))
            })?;
            Ok(EventRecord { timestamp, lat: r.lat, lon: r.lon })
        })
        .collect()
}

pub fn write_accidents(path: &Path, events: &[EventRecord]) -> Result<()> {
    let mut w = writer(path)?;
    w.write_record(["timestamp", "lat", "lon"]).map_err(|e| csv_err(path, e))?;
    for e in events {
        w.write_record([e.timestamp.format("%Y-%m-%dT%H:%M:%S").to_string(), e.lat.to_string(), e.lon.to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HintError::io(path, e))
}

pub fn read_roads(path: &Path) -> Result<Vec<RoadSegment>> {
    read_rows(path)
}

pub fn write_roads(path: &Path, roads: &[RoadSegment]) -> Result<()> {
    write_rows(path, roads)
}

pub fn read_poi(path: &Path) -> Result<Vec<PoiRecord>> {
    read_rows(path)
}

pub fn write_poi(path: &Path, poi: &[PoiRecord]) -> Result<()> {
    write_rows(path, poi)
}

pub fn read_stations(path: &Path) -> Result<Vec<StationRecord>> {
    read_rows(path)
}

pub fn write_stations(path: &Path, rows: &[StationRecord]) -> Result<()> {
    write_rows(path, rows)
}

/// Level map as a headerless CSV matrix, row 0 first.
pub fn write_levelmap_csv(path: &Path, levels: &LevelMap) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(|e| csv_err(path, e))?;
    for row in levels.levels.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| HintError::io(path, e))
}

pub fn read_levelmap_csv(path: &Path) -> Result<LevelMap> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let mut rows: Vec<Vec<u32>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|v| {
                v.parse::<u32>().map_err(|_| {
                    HintError::InvalidInput(format!("{}: line {}: bad level {v:?}", path_str(path), i + 1))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let cols = rows.first().map_or(0, |r| r.len());
    if rows.is_empty() || rows.iter().any(|r| r.len() != cols) {
        return Err(HintError::InvalidInput(format!("{}: level map is empty or ragged", path_str(path))));
    }
    let flat: Vec<u32> = rows.concat();
    let levels = Array2::from_shape_vec((rows.len(), cols), flat).expect("checked shape");
    Ok(LevelMap { levels })
}

/// GeoJSON FeatureCollection with one polygon per cell (WGS84, lon/lat
/// order) carrying `row`, `col` and `level`.
pub fn levelmap_geojson(levels: &LevelMap, spec: &GridSpec) -> serde_json::Value {
    let d = spec.cell_size_km;
    let mut features = Vec::with_capacity(spec.n_cells());
    for ((r, c), &level) in levels.levels.indexed_iter() {
        let (x0, y0) = (c as f64 * d, r as f64 * d);
        let ring: Vec<[f64; 2]> = [(x0, y0), (x0 + d, y0), (x0 + d, y0 + d), (x0, y0 + d), (x0, y0)]
            .iter()
            .map(|&(x, y)| {
                let (lat, lon) = spec.to_latlon(x, y);
                [lon, lat]
            })
            .collect();
        features.push(serde_json::json!({
            "type": "Feature",
            "geometry": { "type": "Polygon", "coordinates": [ring] },
            "properties": { "row": r, "col": c, "level": level },
        }));
    }
    serde_json::json!({ "type": "FeatureCollection", "features": features })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| HintError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| HintError::Json { path: path_str(path), source: e })?;
    w.write_all(b"\n").map_err(|e| HintError::io(path, e))?;
    w.flush().map_err(|e| HintError::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| HintError::io(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| HintError::Json { path: path_str(path), source: e })
}

/// `row,col,date,pred` for every road cell and listed day.
pub fn write_predictions(
    path: &Path,
    pred: &Array3<f64>,
    days: &[usize],
    spec: &GridSpec,
    mask: &RoadMask,
) -> Result<()> {
    if pred.dim().2 != days.len() {
        return Err(HintError::InvalidInput("prediction slices and day list differ in length".into()));
    }
    let mut w = writer(path)?;
    w.write_record(["row", "col", "date", "pred"]).map_err(|e| csv_err(path, e))?;
    for (t, &day) in days.iter().enumerate() {
        let date = spec.date_of(day).to_string();
        for (r, c) in mask.road_cells() {
            w.write_record([r.to_string(), c.to_string(), date.clone(), pred[[r, c, t]].to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
    }
    w.flush().map_err(|e| HintError::io(path, e))
}

const TENSOR_MAGIC: &[u8; 4] = b"HNTF";
const TENSOR_VERSION: u32 = 1;

/// A named dense `f64` array of any rank.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: &str, shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(HintError::InvalidInput(format!("tensor {name}: shape {shape:?} vs {} values", data.len())));
        }
        Ok(NamedTensor { name: name.to_string(), shape: shape.to_vec(), data })
    }
}

/// Binary bundle: magic, version, a JSON metadata string, then tensors
/// (name, rank, dims, little-endian `f64` data).
pub fn write_tensors(path: &Path, meta: &serde_json::Value, tensors: &[NamedTensor]) -> Result<()> {
    let file = File::create(path).map_err(|e| HintError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| HintError::io(path, e);
    let meta = serde_json::to_vec(meta).map_err(|e| HintError::Json { path: path_str(path), source: e })?;
    w.write_all(TENSOR_MAGIC).map_err(io)?;
    w.write_u32::<LittleEndian>(TENSOR_VERSION).map_err(io)?;
    w.write_u64::<LittleEndian>(meta.len() as u64).map_err(io)?;
    w.write_all(&meta).map_err(io)?;
    w.write_u32::<LittleEndian>(tensors.len() as u32).map_err(io)?;
    for t in tensors {
        w.write_u32::<LittleEndian>(t.name.len() as u32).map_err(io)?;
        w.write_all(t.name.as_bytes()).map_err(io)?;
        w.write_u32::<LittleEndian>(t.shape.len() as u32).map_err(io)?;
        for &d in &t.shape {
            w.write_u64::<LittleEndian>(d as u64).map_err(io)?;
        }
        for &v in &t.data {
            w.write_f64::<LittleEndian>(v).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

pub fn read_tensors(path: &Path) -> Result<(serde_json::Value, Vec<NamedTensor>)> {
    let file = File::open(path).map_err(|e| HintError::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| HintError::io(path, e);
    let bad = |msg: &str| HintError::InvalidInput(format!("{}: {msg}", path_str(path)));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != TENSOR_MAGIC {
        return Err(bad("not a tensor bundle"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io)?;
    if version != TENSOR_VERSION {
        return Err(bad(&format!("unsupported tensor bundle version {version}")));
    }
    let meta_len = r.read_u64::<LittleEndian>().map_err(io)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(io)?;
    let meta = serde_json::from_slice(&meta).map_err(|e| HintError::Json { path: path_str(path), source: e })?;
    let n = r.read_u32::<LittleEndian>().map_err(io)?;
    let mut out = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let len = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>().map_err(io)? as usize;
        let shape: Vec<usize> =
            (0..rank).map(|_| r.read_u64::<LittleEndian>().map(|v| v as usize)).collect::<std::io::Result<_>>().map_err(io)?;
        let mut data = vec![0.0; shape.iter().product()];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(io)?;
        out.push(NamedTensor { name, shape, data });
    }
    Ok((meta, out))
}

/// Finds a tensor by name.
pub fn take_tensor<'a>(tensors: &'a [NamedTensor], name: &str) -> Result<&'a NamedTensor> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| HintError::InvalidInput(format!("tensor bundle has no {name:?} entry")))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridSpec {
        GridSpec {
            rows: 2,
            cols: 3,
            cell_size_km: 1.0,
            origin_lat: 41.0,
            origin_lon: -93.0,
            time_start: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
            num_days: 10,
        }
    }

    #[test]
    fn timestamps() {
        let t = parse_timestamp("2016-03-04T05:06:07").unwrap();
        assert_eq!(t.to_string(), "2016-03-04 05:06:07");
        assert_eq!(parse_timestamp("2016-03-04 05:06:07.5").unwrap().date(), t.date());
        assert_eq!(parse_timestamp("2016-03-04T23:30:00-02:00").unwrap().to_string(), "2016-03-05 01:30:00");
        assert_eq!(parse_timestamp("2016-03-04").unwrap().to_string(), "2016-03-04 00:00:00");
        assert!(parse_timestamp("yesterday").is_none());
    }

    #[test]
    fn csv_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let events = vec![EventRecord {
            timestamp: parse_timestamp("2016-01-02T03:04:05").unwrap(),
            lat: 41.25,
            lon: -93.125,
        }];
        let p = dir.path().join("a.csv");
        write_accidents(&p, &events).unwrap();
        assert_eq!(read_accidents(&p).unwrap(), events);

        let roads = vec![RoadSegment {
            lat1: 41.0,
            lon1: -93.0,
            lat2: 41.01,
            lon2: -93.0,
            speed_limit: 55.0,
            aadt: 1200.0,
            road_class: 2,
        }];
        let p = dir.path().join("r.csv");
        write_roads(&p, &roads).unwrap();
        assert_eq!(read_roads(&p).unwrap(), roads);
        let head = std::fs::read_to_string(&p).unwrap();
        assert!(head.starts_with("lat1,lon1,lat2,lon2,speed_limit,aadt,road_class\n"));

        let stations = vec![StationRecord {
            station_id: "w1".into(),
            lat: 41.0,
            lon: -93.0,
            date: NaiveDate::from_ymd_opt(2016, 1, 1).unwrap(),
            channel: "precipitation".into(),
            value: 0.1,
        }];
        let p = dir.path().join("s.csv");
        write_stations(&p, &stations).unwrap();
        assert_eq!(read_stations(&p).unwrap(), stations);
    }

    #[test]
    fn bad_csv_reports_path() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poi.csv");
        std::fs::write(&p, "lat,lon,category\n41.0,-93.0,x\n").unwrap();
        let msg = read_poi(&p).unwrap_err().to_string();
        assert!(msg.contains("poi.csv"), "{msg}");
    }

    #[test]
    fn levelmap_csv_and_geojson() {
        let dir = tempfile::tempdir().unwrap();
        let lm = LevelMap { levels: ndarray::array![[0, 1, 2], [3, 0, 1]] };
        let p = dir.path().join("l.csv");
        write_levelmap_csv(&p, &lm).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "0,1,2\n3,0,1\n");
        assert_eq!(read_levelmap_csv(&p).unwrap(), lm);

        let g = levelmap_geojson(&lm, &spec());
        let f = g["features"].as_array().unwrap();
        assert_eq!(f.len(), 6);
        let ring = f[5]["geometry"]["coordinates"][0].as_array().unwrap();
        assert_eq!(ring.len(), 5);
        assert_eq!(ring[0], ring[4]);
        assert_eq!(f[5]["properties"]["level"], 1);
        let (lat, lon) = (ring[0][1].as_f64().unwrap(), ring[0][0].as_f64().unwrap());
        let (x, y) = spec().to_local(lat, lon);
        assert!((x - 2.0).abs() < 1e-9 && (y - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tensor_bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.bin");
        let t = vec![
            NamedTensor::new("a", &[2, 3], vec![0.1, -2.0, 3.5, f64::MIN_POSITIVE, 1e300, 0.0]).unwrap(),
            NamedTensor::new("b", &[1], vec![7.0]).unwrap(),
        ];
        let meta = serde_json::json!({ "k": 1 });
        write_tensors(&p, &meta, &t).unwrap();
        let (m, back) = read_tensors(&p).unwrap();
        assert_eq!(m, meta);
        assert_eq!(back, t);
        assert!(NamedTensor::new("c", &[2], vec![1.0]).is_err());
        std::fs::write(&p, b"nope").unwrap();
        assert!(read_tensors(&p).is_err());
    }

    #[test]
    fn predictions_only_road_cells() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.csv");
        let mut mask = RoadMask { mask: Array2::zeros((2, 3)) };
        mask.mask[[1, 2]] = 1;
        let pred = Array3::from_elem((2, 3, 2), 0.25);
        write_predictions(&p, &pred, &[3, 4], &spec(), &mask).unwrap();
        assert_eq!(
            std::fs::read_to_string(&p).unwrap(),
            "row,col,date,pred\n1,2,2016-01-04,0.25\n1,2,2016-01-05,0.25\n"
        );
    }
}
