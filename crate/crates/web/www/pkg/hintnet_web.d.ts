/* tslint:disable */
/* eslint-disable */

/**
 * A generated city kept in memory between calls from the page.
 */
export class Demo {
    free(): void;
    [Symbol.dispose](): void;
    accidents(): number;
    correlation(row: number, col: number, w: number): Float64Array;
    levels(gamma: number, eta: number, epsilon: number, k: number): Uint32Array;
    constructor(size: number, days: number, seed: bigint);
    /**
     * 1 for road cells, row-major.
     */
    road_mask(): Uint8Array;
    size(): number;
    /**
     * Accident totals per cell, row-major.
     */
    totals(): Float64Array;
}

export function krige_field(xs: Float64Array, ys: Float64Array, values: Float64Array, size: number, nugget: number, sill: number, range: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_demo_free: (a: number, b: number) => void;
    readonly demo_accidents: (a: number) => number;
    readonly demo_correlation: (a: number, b: number, c: number, d: number) => [number, number, number, number];
    readonly demo_levels: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly demo_new: (a: number, b: number, c: bigint) => [number, number, number];
    readonly demo_road_mask: (a: number) => [number, number];
    readonly demo_size: (a: number) => number;
    readonly demo_totals: (a: number) => [number, number];
    readonly krige_field: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_start: () => void;
}

export type SyncInitInput = BufferSource | WebAssembly.Module;

/**
 * Instantiates the given `module`, which can either be bytes or
 * a precompiled `WebAssembly.Module`.
 *
 * @param {{ module: SyncInitInput }} module - Passing `SyncInitInput` directly is deprecated.
 *
 * @returns {InitOutput}
 */
export function initSync(module: { module: SyncInitInput } | SyncInitInput): InitOutput;

/**
 * If `module_or_path` is {RequestInfo} or {URL}, makes a request and
 * for everything else, calls `WebAssembly.instantiate` directly.
 *
 * @param {{ module_or_path: InitInput | Promise<InitInput> }} module_or_path - Passing `InitInput` directly is deprecated.
 *
 * @returns {Promise<InitOutput>}
 */
export default function __wbg_init (module_or_path?: { module_or_path: InitInput | Promise<InitInput> } | InitInput | Promise<InitInput>): Promise<InitOutput>;
