/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_lab_free: (a: number, b: number) => void;
export const lab_change_rates: (a: number, b: number) => [number, number, number, number];
export const lab_labels: (a: number) => [number, number];
export const lab_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
export const lab_params: (a: number) => number;
export const lab_probe: (a: number, b: number, c: number) => [number, number, number, number];
export const lab_steps: (a: number) => number;
export const lab_train: (a: number, b: number) => [number, number, number];
export const lab_valid_bpc: (a: number) => [number, number, number];
export const lab_vocab: (a: number) => number;
export const sample_text: (a: number, b: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __externref_drop_slice: (a: number, b: number) => void;
export const __wbindgen_malloc: (a: number, b: number) => number;
export const __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
export const __wbindgen_start: () => void;
