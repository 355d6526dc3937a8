/* tslint:disable */
/* eslint-disable */

/**
 * Static responsibility and max-mixture decision as functions of the
 * residual norm.
 */
export function e_step_curve(alpha: number, beta: number, sigma: number, e_max: number, max_residual: number, n: number): string;

export function preset_names(): string;

/**
 * Ground-truth scene of a preset: object corners per frame, robot path,
 * field of view and the simulated measurements.
 */
export function preset_scene(name: string, seed: number): string;

/**
 * Runs the pipeline on a preset and returns trajectories, per-frame maps,
 * metrics and the first EM trace.
 */
export function run_preset(name: string, seed: number, em_iters: number, variant: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly e_step_curve: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly preset_names: () => [number, number];
    readonly preset_scene: (a: number, b: number, c: number) => [number, number, number, number];
    readonly run_preset: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly __wbindgen_externrefs: WebAssembly.Table;
    readonly __externref_table_dealloc: (a: number) => void;
    readonly __wbindgen_free: (a: number, b: number, c: number) => void;
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
