/* tslint:disable */
/* eslint-disable */

/**
 * Maps free head outputs through the anchoring layer, then widens the
 * plug-in envelope by `kappa` standard deviations computed at the given
 * sample sizes.
 */
export function anchoring(l00: number, l01: number, l10: number, l11: number, delta0: number, delta1: number, n_obs: number, n_exp: number, kappa_l: number, kappa_u: number): string;

/**
 * Bound terms, envelope and feasibility for user-entered atoms.
 *
 * The joint cells must lie on the simplex; the interventional means may be
 * anything in `[0, 1]`, so infeasible combinations can be explored.
 */
export function bounds(p00: number, p01: number, p10: number, p11: number, mu0: number, mu1: number): string;

/**
 * Number of observed covariates in Model 1.
 */
export function model1_dim(): number;

/**
 * Exact Model 1 oracle at an observed covariate string such as
 * `"010011..."` (one character per observed covariate).
 */
export function model1_oracle(z: string): string;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly anchoring: (a: number, b: number, c: number, d: number, e: number, f: number, g: number, h: number, i: number, j: number) => [number, number, number, number];
    readonly bounds: (a: number, b: number, c: number, d: number, e: number, f: number) => [number, number, number, number];
    readonly model1_dim: () => number;
    readonly model1_oracle: (a: number, b: number) => [number, number, number, number];
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
