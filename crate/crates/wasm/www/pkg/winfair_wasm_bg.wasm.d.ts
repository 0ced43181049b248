/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const compare_methods: (a: number, b: number, c: bigint, d: number) => [number, number, number, number];
export const explore_factorization: (a: number, b: number, c: bigint, d: number) => [number, number, number, number];
export const representation_scatter: (a: number, b: bigint) => [number, number, number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
