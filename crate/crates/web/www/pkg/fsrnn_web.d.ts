/* tslint:disable */
/* eslint-disable */

export class Lab {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Mean squared per-step change of each layer's cell state.
     */
    change_rates(steps: number): Float64Array;
    labels(): string[];
    /**
     * `arch` is `fs`, `stacked` or `sequential`.
     */
    constructor(text: string, arch: string, width: number, seed: number);
    params(): number;
    /**
     * Mean gradient norm per layer and lag, layer-major, `max_lag + 1`
     * values per layer.
     */
    probe(max_lag: number, samples: number): Float64Array;
    steps(): number;
    /**
     * Runs `n` updates and returns their mean train BPC.
     */
    train(n: number): number;
    valid_bpc(): number;
    vocab(): number;
}

export function sample_text(seed: number, len: number): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_lab_free: (a: number, b: number) => void;
    readonly lab_change_rates: (a: number, b: number) => [number, number, number, number];
    readonly lab_labels: (a: number) => [number, number];
    readonly lab_new: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number];
    readonly lab_params: (a: number) => number;
    readonly lab_probe: (a: number, b: number, c: number) => [number, number, number, number];
    readonly lab_steps: (a: number) => number;
    readonly lab_train: (a: number, b: number) => [number, number, number];
    readonly lab_valid_bpc: (a: number) => [number, number, number];
    readonly lab_vocab: (a: number) => number;
    readonly sample_text: (a: number, b: number) => [number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
    readonly __externref_drop_slice: (a: number, b: number) => void;
    readonly __wbindgen_malloc: (a: number, b: number) => number;
    readonly __wbindgen_realloc: (a: number, b: number, c: number, d: number) => number;
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
