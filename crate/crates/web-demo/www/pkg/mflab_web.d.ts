/* tslint:disable */
/* eslint-disable */

/**
 * Flat layout: `[euler_ed, exact_ed, n, noise.., euler.., exact..]`, each
 * point as `x, y`.
 */
export function compare_samplers(modes: number, radius: number, n: number, euler_steps: number, seed: number): Float64Array;

export function inference_gflops(decoder: number, backbone: number, nfe: number): number;

export function velocity_field(modes: number, radius: number, t: number, grid: number, extent: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly compare_samplers: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly inference_gflops: (a: number, b: number, c: number) => [number, number, number];
    readonly velocity_field: (a: number, b: number, c: number, d: number, e: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
