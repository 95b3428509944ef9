/* @ts-self-types="./harma_demo.d.ts" */

/**
 * Paired points on the unit circle plus their retrieval and geometry statistics.
 */
export class CircleReport {
    static __wrap(ptr) {
        const obj = Object.create(CircleReport.prototype);
        obj.__wbg_ptr = ptr;
        CircleReportFinalization.register(obj, obj.__wbg_ptr, obj);
        return obj;
    }
    __destroy_into_raw() {
        const ptr = this.__wbg_ptr;
        this.__wbg_ptr = 0;
        CircleReportFinalization.unregister(this);
        return ptr;
    }
    free() {
        const ptr = this.__destroy_into_raw();
        wasm.__wbg_circlereport_free(ptr, 0);
    }
    /**
     * Interleaved `[image_x, image_y, text_x, text_y]` per pair.
     * @returns {Float64Array}
     */
    points() {
        const ret = wasm.circlereport_points(this.__wbg_ptr);
        var v1 = getArrayF64FromWasm0(ret[0], ret[1]).slice();
        wasm.__wbindgen_free(ret[0], ret[1] * 8, 8);
        return v1;
    }
    /**
     * @returns {number}
     */
    get alignment() {
        const ret = wasm.__wbg_get_circlereport_alignment(this.__wbg_ptr);
        return ret;
    }
    /**
     * @returns {number}
     */
    get mean_recall() {
        const ret = wasm.__wbg_get_circlereport_mean_recall(this.__wbg_ptr);
        return ret;
    }
    /**
     * @returns {number}
     */
    get modality_gap() {
        const ret = wasm.__wbg_get_circlereport_modality_gap(this.__wbg_ptr);
        return ret;
    }
    /**
     * @returns {number}
     */
    get uniformity() {
        const ret = wasm.__wbg_get_circlereport_uniformity(this.__wbg_ptr);
        return ret;
    }
    /**
     * @param {number} arg0
     */
    set alignment(arg0) {
        wasm.__wbg_set_circlereport_alignment(this.__wbg_ptr, arg0);
    }
    /**
     * @param {number} arg0
     */
    set mean_recall(arg0) {
        wasm.__wbg_set_circlereport_mean_recall(this.__wbg_ptr, arg0);
    }
    /**
     * @param {number} arg0
     */
    set modality_gap(arg0) {
        wasm.__wbg_set_circlereport_modality_gap(this.__wbg_ptr, arg0);
    }
    /**
     * @param {number} arg0
     */
    set uniformity(arg0) {
        wasm.__wbg_set_circlereport_uniformity(this.__wbg_ptr, arg0);
    }
}
if (Symbol.dispose) CircleReport.prototype[Symbol.dispose] = CircleReport.prototype.free;

/**
 * A fixed random gated adapter with non-zero up-projection, on fixed random tokens.
 */
export class GateProbe {
    __destroy_into_raw() {
        const ptr = this.__wbg_ptr;
        this.__wbg_ptr = 0;
        GateProbeFinalization.unregister(this);
        return ptr;
    }
    free() {
        const ptr = this.__destroy_into_raw();
        wasm.__wbg_gateprobe_free(ptr, 0);
    }
    /**
     * Image-stream response over a `steps × steps` grid of gate values in `[0, 1]`,
     * row-major with the first gate along rows.
     * @param {number} steps
     * @returns {Float64Array}
     */
    grid(steps) {
        const ret = wasm.gateprobe_grid(this.__wbg_ptr, steps);
        if (ret[3]) {
            throw takeFromExternrefTable0(ret[2]);
        }
        var v1 = getArrayF64FromWasm0(ret[0], ret[1]).slice();
        wasm.__wbindgen_free(ret[0], ret[1] * 8, 8);
        return v1;
    }
    /**
     * @param {bigint} seed
     */
    constructor(seed) {
        const ret = wasm.gateprobe_new(seed);
        if (ret[2]) {
            throw takeFromExternrefTable0(ret[1]);
        }
        this.__wbg_ptr = ret[0];
        GateProbeFinalization.register(this, this.__wbg_ptr, this);
        return this;
    }
    /**
     * Mean per-token distance between adapter output and input, `[image, text]`, at the
     * given gate values.
     * @param {number} gate1
     * @param {number} gate2
     * @returns {Float64Array}
     */
    response(gate1, gate2) {
        const ret = wasm.gateprobe_response(this.__wbg_ptr, gate1, gate2);
        if (ret[3]) {
            throw takeFromExternrefTable0(ret[2]);
        }
        var v1 = getArrayF64FromWasm0(ret[0], ret[1]).slice();
        wasm.__wbindgen_free(ret[0], ret[1] * 8, 8);
        return v1;
    }
}
if (Symbol.dispose) GateProbe.prototype[Symbol.dispose] = GateProbe.prototype.free;

/**
 * `n` images spread over a `spread` fraction of the circle, each caption rotated from its
 * image by Gaussian noise of width `noise` radians plus a fixed `offset`.
 * @param {number} n
 * @param {number} spread
 * @param {number} noise
 * @param {number} offset
 * @param {bigint} seed
 * @returns {CircleReport}
 */
export function circle_embeddings(n, spread, noise, offset, seed) {
    const ret = wasm.circle_embeddings(n, spread, noise, offset, seed);
    if (ret[2]) {
        throw takeFromExternrefTable0(ret[1]);
    }
    return CircleReport.__wrap(ret[0]);
}

/**
 * Plain triplet, adaptive triplet and contrastive loss on a random `n × n` similarity
 * matrix whose diagonal sits `separation` above the off-diagonal mean.
 * @param {number} n
 * @param {number} separation
 * @param {number} margin
 * @param {number} gamma
 * @param {number} tau
 * @param {bigint} seed
 * @returns {Float64Array}
 */
export function loss_comparison(n, separation, margin, gamma, tau, seed) {
    const ret = wasm.loss_comparison(n, separation, margin, gamma, tau, seed);
    if (ret[3]) {
        throw takeFromExternrefTable0(ret[2]);
    }
    var v1 = getArrayF64FromWasm0(ret[0], ret[1]).slice();
    wasm.__wbindgen_free(ret[0], ret[1] * 8, 8);
    return v1;
}

/**
 * `points` samples of the adaptive weight over hinge values `0..=HINGE_RANGE`.
 * @param {number} gamma
 * @param {number} points
 * @returns {Float64Array}
 */
export function weight_curve(gamma, points) {
    const ret = wasm.weight_curve(gamma, points);
    var v1 = getArrayF64FromWasm0(ret[0], ret[1]).slice();
    wasm.__wbindgen_free(ret[0], ret[1] * 8, 8);
    return v1;
}
function __wbg_get_imports() {
    const import0 = {
        __proto__: null,
        __wbg_Error_30c8987f7c2ed4e2: function(arg0, arg1) {
            const ret = Error(getStringFromWasm0(arg0, arg1));
            return ret;
        },
        __wbg___wbindgen_throw_41e9ee4f547fc59a: function(arg0, arg1) {
            throw new Error(getStringFromWasm0(arg0, arg1));
        },
        __wbindgen_init_externref_table: function() {
            const table = wasm.__wbindgen_externrefs;
            const offset = table.grow(4);
            table.set(0, undefined);
            table.set(offset + 0, undefined);
            table.set(offset + 1, null);
            table.set(offset + 2, true);
            table.set(offset + 3, false);
        },
    };
    return {
        __proto__: null,
        "./harma_demo_bg.js": import0,
    };
}

const CircleReportFinalization = (typeof FinalizationRegistry === 'undefined')
    ? { register: () => {}, unregister: () => {} }
    : new FinalizationRegistry(ptr => wasm.__wbg_circlereport_free(ptr, 1));
const GateProbeFinalization = (typeof FinalizationRegistry === 'undefined')
    ? { register: () => {}, unregister: () => {} }
    : new FinalizationRegistry(ptr => wasm.__wbg_gateprobe_free(ptr, 1));

function getArrayF64FromWasm0(ptr, len) {
    ptr = ptr >>> 0;
    return getFloat64ArrayMemory0().subarray(ptr / 8, ptr / 8 + len);
}

let cachedFloat64ArrayMemory0 = null;
function getFloat64ArrayMemory0() {
    if (cachedFloat64ArrayMemory0 === null || cachedFloat64ArrayMemory0.byteLength === 0) {
        cachedFloat64ArrayMemory0 = new Float64Array(wasm.memory.buffer);
    }
    return cachedFloat64ArrayMemory0;
}

function getStringFromWasm0(ptr, len) {
    return decodeText(ptr >>> 0, len);
}

let cachedUint8ArrayMemory0 = null;
function getUint8ArrayMemory0() {
    if (cachedUint8ArrayMemory0 === null || cachedUint8ArrayMemory0.byteLength === 0) {
        cachedUint8ArrayMemory0 = new Uint8Array(wasm.memory.buffer);
    }
    return cachedUint8ArrayMemory0;
}

function takeFromExternrefTable0(idx) {
    const value = wasm.__wbindgen_externrefs.get(idx);
    wasm.__externref_table_dealloc(idx);
    return value;
}

let cachedTextDecoder = new TextDecoder('utf-8', { ignoreBOM: true, fatal: true });
cachedTextDecoder.decode();
const MAX_SAFARI_DECODE_BYTES = 2146435072;
let numBytesDecoded = 0;
function decodeText(ptr, len) {
    numBytesDecoded += len;
    if (numBytesDecoded >= MAX_SAFARI_DECODE_BYTES) {
        cachedTextDecoder = new TextDecoder('utf-8', { ignoreBOM: true, fatal: true });
        cachedTextDecoder.decode();
        numBytesDecoded = len;
    }
    return cachedTextDecoder.decode(getUint8ArrayMemory0().subarray(ptr, ptr + len));
}

let wasmModule, wasmInstance, wasm;
function __wbg_finalize_init(instance, module) {
    wasmInstance = instance;
    wasm = instance.exports;
    wasmModule = module;
    cachedFloat64ArrayMemory0 = null;
    cachedUint8ArrayMemory0 = null;
    wasm.__wbindgen_start();
    return wasm;
}

async function __wbg_load(module, imports) {
    if (typeof Response === 'function' && module instanceof Response) {
        if (!module.ok) {
            throw new Error(`failed to fetch Wasm: ${module.status} ${module.statusText} fetching '${module.url}'`);
        }

        if (typeof WebAssembly.instantiateStreaming === 'function') {
            try {
                return await WebAssembly.instantiateStreaming(module, imports);
            } catch (e) {
                const validResponse = expectedResponseType(module.type);

                if (validResponse && module.headers.get('Content-Type') !== 'application/wasm') {
                    console.warn("`WebAssembly.instantiateStreaming` failed because your server does not serve Wasm with `application/wasm` MIME type. Falling back to `WebAssembly.instantiate` which is slower. Original error:\n", e);

                } else { throw e; }
            }
        }

        const bytes = await module.arrayBuffer();
        return await WebAssembly.instantiate(bytes, imports);
    } else {
        const instance = await WebAssembly.instantiate(module, imports);

        if (instance instanceof WebAssembly.Instance) {
            return { instance, module };
        } else {
            return instance;
        }
    }

    function expectedResponseType(type) {
        switch (type) {
            case 'basic': case 'cors': case 'default': return true;
        }
        return false;
    }
}

function initSync(module) {
    if (wasm !== undefined) return wasm;


    if (module !== undefined) {
        if (Object.getPrototypeOf(module) === Object.prototype) {
            ({module} = module)
        } else {
            console.warn('using deprecated parameters for `initSync()`; pass a single object instead')
        }
    }

    const imports = __wbg_get_imports();
    if (!(module instanceof WebAssembly.Module)) {
        module = new WebAssembly.Module(module);
    }
    const instance = new WebAssembly.Instance(module, imports);
    return __wbg_finalize_init(instance, module);
}

async function __wbg_init(module_or_path) {
    if (wasm !== undefined) return wasm;


    if (module_or_path !== undefined) {
        if (Object.getPrototypeOf(module_or_path) === Object.prototype) {
            ({module_or_path} = module_or_path)
        } else {
            console.warn('using deprecated parameters for the initialization function; pass a single object instead')
        }
    }

    if (module_or_path === undefined) {
        module_or_path = new URL('harma_demo_bg.wasm', import.meta.url);
    }
    const imports = __wbg_get_imports();

    if (typeof module_or_path === 'string' || (typeof Request === 'function' && module_or_path instanceof Request) || (typeof URL === 'function' && module_or_path instanceof URL)) {
        module_or_path = fetch(module_or_path);
    }

    const { instance, module } = await __wbg_load(await module_or_path, imports);

    return __wbg_finalize_init(instance, module);
}

export { initSync, __wbg_init as default };
