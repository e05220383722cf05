/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_demo_free: (a: number, b: number) => void;
export const demo_accidents: (a: number) => number;
export const demo_correlation: (a: number, b: number, c: number, d: number) => [number, number, number, number];
export const demo_levels: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
export const demo_new: (a: number, b: number, c: bigint) => [number, number, number];
export const demo_road_mask: (a: number) => [number, number];
export const demo_size: (a: number) => number;
export const demo_totals: (a: number) => [number, number];
export const krige_field: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_start: () => void;
