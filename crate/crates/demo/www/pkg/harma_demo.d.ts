/* tslint:disable */
/* eslint-disable */

/**
 * Paired points on the unit circle plus their retrieval and geometry statistics.
 */
export class CircleReport {
    private constructor();
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Interleaved `[image_x, image_y, text_x, text_y]` per pair.
     */
    points(): Float64Array;
    alignment: number;
    mean_recall: number;
    modality_gap: number;
    uniformity: number;
}

/**
 * A fixed random gated adapter with non-zero up-projection, on fixed random tokens.
 */
export class GateProbe {
    free(): void;
    [Symbol.dispose](): void;
    /**
     * Image-stream response over a `steps × steps` grid of gate values in `[0, 1]`,
     * row-major with the first gate along rows.
     */
    grid(steps: number): Float64Array;
    constructor(seed: bigint);
    /**
     * Mean per-token distance between adapter output and input, `[image, text]`, at the
     * given gate values.
     */
    response(gate1: number, gate2: number): Float64Array;
}

/**
 * `n` images spread over a `spread` fraction of the circle, each caption rotated from its
 * image by Gaussian noise of width `noise` radians plus a fixed `offset`.
 */
export function circle_embeddings(n: number, spread: number, noise: number, offset: number, seed: bigint): CircleReport;

/**
 * Plain triplet, adaptive triplet and contrastive loss on a random `n × n` similarity
 * matrix whose diagonal sits `separation` above the off-diagonal mean.
 */
export function loss_comparison(n: number, separation: number, margin: number, gamma: number, tau: number, seed: bigint): Float64Array;

/**
 * `points` samples of the adaptive weight over hinge values `0..=HINGE_RANGE`.
 */
export function weight_curve(gamma: number, points: number): Float64Array;

export type InitInput = RequestInfo | URL | Response | BufferSource | WebAssembly.Module;

export interface InitOutput {
    readonly memory: WebAssembly.Memory;
    readonly __wbg_circlereport_free: (a: number, b: number) => void;
    readonly __wbg_gateprobe_free: (a: number, b: number) => void;
    readonly __wbg_get_circlereport_alignment: (a: number) => number;
    readonly __wbg_get_circlereport_mean_recall: (a: number) => number;
    readonly __wbg_get_circlereport_modality_gap: (a: number) => number;
    readonly __wbg_get_circlereport_uniformity: (a: number) => number;
    readonly __wbg_set_circlereport_alignment: (a: number, b: number) => void;
    readonly __wbg_set_circlereport_mean_recall: (a: number, b: number) => void;
    readonly __wbg_set_circlereport_modality_gap: (a: number, b: number) => void;
    readonly __wbg_set_circlereport_uniformity: (a: number, b: number) => void;
    readonly circle_embeddings: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
    readonly circlereport_points: (a: number) => [number, number];
    readonly gateprobe_grid: (a: number, b: number) => [number, number, number, number];
    readonly gateprobe_new: (a: bigint) => [number, number, number];
    readonly gateprobe_response: (a: number, b: number, c: number) => [number, number, number, number];
    readonly loss_comparison: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
    readonly weight_curve: (a: number, b: number) => [number, number];
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
