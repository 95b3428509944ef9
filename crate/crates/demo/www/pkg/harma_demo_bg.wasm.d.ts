/* tslint:disable */
/* eslint-disable */
export const memory: WebAssembly.Memory;
export const __wbg_circlereport_free: (a: number, b: number) => void;
export const __wbg_gateprobe_free: (a: number, b: number) => void;
export const __wbg_get_circlereport_alignment: (a: number) => number;
export const __wbg_get_circlereport_mean_recall: (a: number) => number;
export const __wbg_get_circlereport_modality_gap: (a: number) => number;
export const __wbg_get_circlereport_uniformity: (a: number) => number;
export const __wbg_set_circlereport_alignment: (a: number, b: number) => void;
export const __wbg_set_circlereport_mean_recall: (a: number, b: number) => void;
export const __wbg_set_circlereport_modality_gap: (a: number, b: number) => void;
export const __wbg_set_circlereport_uniformity: (a: number, b: number) => void;
export const circle_embeddings: (a: number, b: number, c: number, d: number, e: bigint) => [number, number, number];
export const circlereport_points: (a: number) => [number, number];
export const gateprobe_grid: (a: number, b: number) => [number, number, number, number];
export const gateprobe_new: (a: bigint) => [number, number, number];
export const gateprobe_response: (a: number, b: number, c: number) => [number, number, number, number];
export const loss_comparison: (a: number, b: number, c: number, d: number, e: number, f: bigint) => [number, number, number, number];
export const weight_curve: (a: number, b: number) => [number, number];
export const __wbindgen_externrefs: WebAssembly.Table;
export const __externref_table_dealloc: (a: number) => void;
export const __wbindgen_free: (a: number, b: number, c: number) => void;
export const __wbindgen_start: () => void;
