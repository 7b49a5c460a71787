//! C ABI for the simulator. Every object crosses the boundary as an opaque
//! handle; every call returns a status code, with the message of the last
//! failure retrievable per thread via `gs_last_error`.

use granusim::data::{FineLabel, SampleKind, Sign};
use granusim::dict::{build_dictionary, DictMode, Dictionary};
use granusim::error::SimError;
use granusim::hierarchy::{level_k_label, lloyd_kmeans, Taxonomy};
use granusim::model::{forward_patches, init_network, Network};
use granusim::params::{HyperParams, Variant};
use granusim::probes::hard_example_audit;
use granusim::trainer::{train_run, BiasRule, TrainConfig};
use libc::{c_char, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::path::Path;

/// Status codes returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidArgument = 2,
    ConfigError = 3,
    ContractViolation = 4,
    Diverged = 5,
    IoError = 6,
    Utf8Error = 7,
    InternalError = 8,
}

/// Opaque hyperparameter handle.
pub struct GsParams {
    inner: HyperParams,
}

/// Opaque dictionary handle.
pub struct GsDictionary {
    inner: Dictionary,
}

/// Opaque network handle.
pub struct GsNetwork {
    inner: Network,
}

/// Training options mirrored over the ABI.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct GsTrainOptions {
    /// 0 = coarse, 1 = fine
    pub regime: u32,
    pub max_steps: u64,
    pub eta: f64,
    /// 0 = plain decay, 1 = clipped decay
    pub bias_rule: u32,
    pub log_every: u64,
    pub loss_floor: f64,
    pub seed: u64,
    pub diag_per_subclass: u64,
}

/// Hard-example audit result.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct GsAudit {
    pub normal_mean_f_y: f64,
    pub normal_accuracy: f64,
    pub hard_mean_f_y: f64,
    pub hard_accuracy: f64,
    pub hard_vs_normal_ratio: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &SimError) -> GsStatus {
    match err {
        SimError::Config(_) => GsStatus::ConfigError,
        SimError::Contract(_) | SimError::KinkGuard(_) => GsStatus::ContractViolation,
        SimError::Diverged { .. } => GsStatus::Diverged,
        SimError::Io(_) | SimError::MissingArtifacts(_) => GsStatus::IoError,
        _ => GsStatus::InternalError,
    }
}

fn fail(err: SimError) -> GsStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, GsStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(GsStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        GsStatus::Utf8Error
    })
}

/// Library version as a static C string.
#[no_mangle]
pub extern "C" fn gs_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Copies the last error message of this thread into `buf` (always
/// NUL-terminated when `len > 0`); returns the full message length.
#[no_mangle]
pub unsafe extern "C" fn gs_last_error(buf: *mut c_char, len: size_t) -> size_t {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf as *mut u8, n);
            *buf.add(n) = 0;
        }
        bytes.len()
    })
}

/// Workstation-scale preset.
#[no_mangle]
pub unsafe extern "C" fn gs_params_desk(out: *mut *mut GsParams) -> GsStatus {
    if out.is_null() {
        set_error("null out pointer");
        return GsStatus::NullArgument;
    }
    *out = Box::into_raw(Box::new(GsParams {
        inner: HyperParams::desk(),
    }));
    GsStatus::Ok
}

/// Asymptotic preset at the given ambient dimension.
#[no_mangle]
pub unsafe extern "C" fn gs_params_paper_asymptotic(d: u64, out: *mut *mut GsParams) -> GsStatus {
    if out.is_null() {
        set_error("null out pointer");
        return GsStatus::NullArgument;
    }
    let p = HyperParams::paper_asymptotic(d as usize);
    if let Err(e) = p.validate() {
        return fail(e);
    }
    *out = Box::into_raw(Box::new(GsParams { inner: p }));
    GsStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn gs_params_free(p: *mut GsParams) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

fn set_field(p: &mut HyperParams, key: &str, value: f64) -> Result<(), String> {
    let as_usize = || -> Result<usize, String> {
        if value < 0.0 || value.fract() != 0.0 {
            Err(format!("{key} needs a non-negative integer, got {value}"))
        } else {
            Ok(value as usize)
        }
    };
    match key {
        "d" => p.d = as_usize()?,
        "p" => p.p = as_usize()?,
        "s_star" => p.s_star = as_usize()?,
        "s_f" => p.s_f = as_usize()?,
        "k_plus" => p.k_plus = as_usize()?,
        "k_minus" => p.k_minus = as_usize()?,
        "m" => p.m = as_usize()?,
        "m_sub" => p.m_sub = as_usize()?,
        "batch_size" => p.batch_size = as_usize()?,
        "iota" => p.iota = value,
        "gamma" => p.gamma = value,
        "sigma_zeta" => p.sigma_zeta = value,
        "sigma_0" => p.sigma_0 = value,
        "c_0" => p.c_0 = value,
        "eta" => p.eta = value,
        "bias_decay_beta" => p.bias_decay_beta = value,
        "bias_z_coarse" => p.bias_z_coarse = Some(value),
        "bias_z_fine" => p.bias_z_fine = Some(value),
        "theta_gap_mult" => p.theta_gap_mult = value,
        "bias_scale" => p.bias_scale = value,
        _ => return Err(format!("unknown hyperparameter '{key}'")),
    }
    Ok(())
}

fn get_field(p: &HyperParams, key: &str) -> Result<f64, String> {
    Ok(match key {
        "d" => p.d as f64,
        "p" => p.p as f64,
        "s_star" => p.s_star as f64,
        "s_f" => p.s_f as f64,
        "k_plus" => p.k_plus as f64,
        "k_minus" => p.k_minus as f64,
        "m" => p.m as f64,
        "m_sub" => p.m_sub as f64,
        "batch_size" => p.batch_size as f64,
        "iota" => p.iota,
        "gamma" => p.gamma,
        "sigma_zeta" => p.sigma_zeta,
        "sigma_0" => p.sigma_0,
        "c_0" => p.c_0,
        "eta" => p.eta,
        "bias_decay_beta" => p.bias_decay_beta,
        "theta_gap_mult" => p.theta_gap_mult,
        "bias_scale" => p.bias_scale,
        _ => return Err(format!("unknown hyperparameter '{key}'")),
    })
}

/// Sets one hyperparameter by name. Integer fields reject fractional values.
#[no_mangle]
pub unsafe extern "C" fn gs_params_set(
    p: *mut GsParams,
    key: *const c_char,
    value: f64,
) -> GsStatus {
    if p.is_null() {
        set_error("null params handle");
        return GsStatus::NullArgument;
    }
    let key = match cstr(key) {
        Ok(k) => k,
        Err(s) => return s,
    };
    match set_field(&mut (*p).inner, key, value) {
        Ok(()) => GsStatus::Ok,
        Err(msg) => {
            set_error(msg);
            GsStatus::InvalidArgument
        }
    }
}

/// Reads one hyperparameter by name.
#[no_mangle]
pub unsafe extern "C" fn gs_params_get(
    p: *const GsParams,
    key: *const c_char,
    out: *mut f64,
) -> GsStatus {
    if p.is_null() || out.is_null() {
        set_error("null argument");
        return GsStatus::NullArgument;
    }
    let key = match cstr(key) {
        Ok(k) => k,
        Err(s) => return s,
    };
    match get_field(&(*p).inner, key) {
        Ok(v) => {
            *out = v;
            GsStatus::Ok
        }
        Err(msg) => {
            set_error(msg);
            GsStatus::InvalidArgument
        }
    }
}

/// Validates the full parameter set.
#[no_mangle]
pub unsafe extern "C" fn gs_params_validate(p: *const GsParams) -> GsStatus {
    if p.is_null() {
        set_error("null params handle");
        return GsStatus::NullArgument;
    }
    match (*p).inner.validate() {
        Ok(()) => GsStatus::Ok,
        Err(e) => fail(e),
    }
}

fn dict_mode_of(mode: u32) -> Result<DictMode, GsStatus> {
    match mode {
        0 => Ok(DictMode::StandardBasis),
        1 => Ok(DictMode::RandomOrthogonal),
        _ => {
            set_error(format!("unknown dictionary mode {mode}"));
            Err(GsStatus::InvalidArgument)
        }
    }
}

fn variant_of(v: u32) -> Result<Variant, GsStatus> {
    match v {
        0 => Ok(Variant::Coarse),
        1 => Ok(Variant::Fine),
        _ => {
            set_error(format!("unknown variant {v}"));
            Err(GsStatus::InvalidArgument)
        }
    }
}

/// Builds the orthonormal dictionary. mode: 0 = standard basis,
/// 1 = random orthogonal.
#[no_mangle]
pub unsafe extern "C" fn gs_dictionary_build(
    params: *const GsParams,
    mode: u32,
    seed: u64,
    out: *mut *mut GsDictionary,
) -> GsStatus {
    if params.is_null() || out.is_null() {
        set_error("null argument");
        return GsStatus::NullArgument;
    }
    let mode = match dict_mode_of(mode) {
        Ok(m) => m,
        Err(s) => return s,
    };
    match build_dictionary(&(*params).inner, mode, seed) {
        Ok(d) => {
            *out = Box::into_raw(Box::new(GsDictionary { inner: d }));
            GsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn gs_dictionary_free(d: *mut GsDictionary) {
    if !d.is_null() {
        drop(Box::from_raw(d));
    }
}

/// Max absolute Gram-matrix deviation from the identity.
#[no_mangle]
pub unsafe extern "C" fn gs_dictionary_gram_max_dev(
    d: *const GsDictionary,
    out: *mut f64,
) -> GsStatus {
    if d.is_null() || out.is_null() {
        set_error("null argument");
        return GsStatus::NullArgument;
    }
    *out = (*d).inner.gram_max_dev();
    GsStatus::Ok
}

#[no_mangle]
pub unsafe extern "C" fn gs_dictionary_save(
    d: *const GsDictionary,
    path: *const c_char,
) -> GsStatus {
    if d.is_null() {
        set_error("null dictionary handle");
        return GsStatus::NullArgument;
    }
    let path = match cstr(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match (*d).inner.save(Path::new(path)) {
        Ok(()) => GsStatus::Ok,
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn gs_dictionary_load(
    path: *const c_char,
    out: *mut *mut GsDictionary,
) -> GsStatus {
    if out.is_null() {
        set_error("null out pointer");
        return GsStatus::NullArgument;
    }
    let path = match cstr(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match Dictionary::load(Path::new(path)) {
        Ok(d) => {
            *out = Box::into_raw(Box::new(GsDictionary { inner: d }));
            GsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Initializes a network. variant: 0 = coarse, 1 = fine.
#[no_mangle]
pub unsafe extern "C" fn gs_network_init(
    params: *const GsParams,
    variant: u32,
    seed: u64,
    out: *mut *mut GsNetwork,
) -> GsStatus {
    if params.is_null() || out.is_null() {
        set_error("null argument");
        return GsStatus::NullArgument;
    }
    let variant = match variant_of(variant) {
        Ok(v) => v,
        Err(s) => return s,
    };
    match init_network(&(*params).inner, variant, seed) {
        Ok(n) => {
            *out = Box::into_raw(Box::new(GsNetwork { inner: n }));
            GsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn gs_network_free(n: *mut GsNetwork) {
    if !n.is_null() {
        drop(Box::from_raw(n));
    }
}

#[no_mangle]
pub unsafe extern "C" fn gs_network_n_heads(n: *const GsNetwork, out: *mut u64) -> GsStatus {
    if n.is_null() || out.is_null() {
        set_error("null argument");
        return GsStatus::NullArgument;
    }
    *out = (*n).inner.n_heads() as u64;
    GsStatus::Ok
}

/// Forward pass on a row-major p x d patch matrix; writes one response per
/// head into `responses` (length `n_heads`).
#[no_mangle]
pub unsafe extern "C" fn gs_network_forward(
    net: *const GsNetwork,
    patches: *const f64,
    p: u64,
    d: u64,
    responses: *mut f64,
    n_heads: u64,
) -> GsStatus {
    if net.is_null() || patches.is_null() || responses.is_null() {
        set_error("null argument");
        return GsStatus::NullArgument;
    }
    let net = &(*net).inner;
    if n_heads as usize != net.n_heads() {
        set_error(format!(
            "response buffer holds {n_heads} heads, network has {}",
            net.n_heads()
        ));
        return GsStatus::ContractViolation;
    }
    let slice = std::slice::from_raw_parts(patches, (p * d) as usize);
    let x = match ndarray::Array2::from_shape_vec((p as usize, d as usize), slice.to_vec()) {
        Ok(x) => x,
        Err(e) => {
            set_error(e.to_string());
            return GsStatus::InvalidArgument;
        }
    };
    match forward_patches(net, x.view(), false) {
        Ok(resp) => {
            let out = std::slice::from_raw_parts_mut(responses, n_heads as usize);
            out.copy_from_slice(&resp.per_class);
            GsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn gs_network_save(n: *const GsNetwork, path: *const c_char) -> GsStatus {
    if n.is_null() {
        set_error("null network handle");
        return GsStatus::NullArgument;
    }
    let path = match cstr(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match (*n).inner.save(Path::new(path)) {
        Ok(()) => GsStatus::Ok,
        Err(e) => fail(e),
    }
}

#[no_mangle]
pub unsafe extern "C" fn gs_network_load(
    path: *const c_char,
    out: *mut *mut GsNetwork,
) -> GsStatus {
    if out.is_null() {
        set_error("null out pointer");
        return GsStatus::NullArgument;
    }
    let path = match cstr(path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    match Network::load(Path::new(path)) {
        Ok(n) => {
            *out = Box::into_raw(Box::new(GsNetwork { inner: n }));
            GsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Runs online SGD; optionally streams the history as JSON lines to
/// `history_path` (pass NULL to skip). Returns the trained network.
#[no_mangle]
pub unsafe extern "C" fn gs_train_run(
    params: *const GsParams,
    dict: *const GsDictionary,
    options: *const GsTrainOptions,
    history_path: *const c_char,
    out: *mut *mut GsNetwork,
) -> GsStatus {
    if params.is_null() || dict.is_null() || options.is_null() || out.is_null() {
        set_error("null argument");
        return GsStatus::NullArgument;
    }
    let opts = &*options;
    let regime = match variant_of(opts.regime) {
        Ok(v) => v,
        Err(s) => return s,
    };
    let bias_rule = match opts.bias_rule {
        0 => BiasRule::PlainDecay,
        1 => BiasRule::ClippedDecay,
        other => {
            set_error(format!("unknown bias rule {other}"));
            return GsStatus::InvalidArgument;
        }
    };
    let cfg = TrainConfig {
        regime,
        max_steps: opts.max_steps,
        eta: opts.eta,
        bias_rule,
        log_every: opts.log_every.max(1),
        loss_floor: opts.loss_floor,
        seed: opts.seed,
        diag_per_subclass: (opts.diag_per_subclass as usize).max(1),
    };
    let history = if history_path.is_null() {
        None
    } else {
        match cstr(history_path) {
            Ok(p) => Some(p.to_string()),
            Err(s) => return s,
        }
    };
    match train_run(&(*params).inner, &cfg, &(*dict).inner) {
        Ok(outcome) => {
            if let Some(hp) = history {
                let write = || -> granusim::Result<()> {
                    let mut w = std::io::BufWriter::new(std::fs::File::create(&hp)?);
                    outcome.history.write_jsonl(&mut w)
                };
                if let Err(e) = write() {
                    return fail(e);
                }
            }
            *out = Box::into_raw(Box::new(GsNetwork {
                inner: outcome.network,
            }));
            GsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Evaluates fresh normal and hard sets with the trained network
/// (fine-variant responses are aggregated to the coarse heads first).
#[no_mangle]
pub unsafe extern "C" fn gs_hard_example_audit(
    net: *const GsNetwork,
    dict: *const GsDictionary,
    params: *const GsParams,
    n_eval_per_subclass: u64,
    seed: u64,
    out: *mut GsAudit,
) -> GsStatus {
    if net.is_null() || dict.is_null() || params.is_null() || out.is_null() {
        set_error("null argument");
        return GsStatus::NullArgument;
    }
    match hard_example_audit(
        &(*net).inner,
        &(*dict).inner,
        &(*params).inner,
        n_eval_per_subclass as usize,
        seed,
    ) {
        Ok(a) => {
            *out = GsAudit {
                normal_mean_f_y: a.normal.mean_f_y,
                normal_accuracy: a.normal.accuracy,
                hard_mean_f_y: a.hard.mean_f_y,
                hard_accuracy: a.hard.accuracy,
                hard_vs_normal_ratio: a.hard_vs_normal_ratio,
            };
            GsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Draws one sample (kind: 0 = normal, 1 = hard) into a row-major p x d
/// buffer; `coarse_label_out` receives +1/-1.
#[no_mangle]
pub unsafe extern "C" fn gs_sample_example(
    dict: *const GsDictionary,
    params: *const GsParams,
    sign: i32,
    subclass: u64,
    kind: u32,
    stream_seed: u64,
    patches_out: *mut f64,
    buf_len: u64,
    coarse_label_out: *mut i32,
) -> GsStatus {
    if dict.is_null() || params.is_null() || patches_out.is_null() {
        set_error("null argument");
        return GsStatus::NullArgument;
    }
    let p = &(*params).inner;
    if buf_len as usize != p.p * p.d {
        set_error(format!(
            "patch buffer holds {buf_len} values, need p*d = {}",
            p.p * p.d
        ));
        return GsStatus::ContractViolation;
    }
    let fine = FineLabel {
        sign: if sign >= 0 { Sign::Plus } else { Sign::Minus },
        c: subclass as usize,
    };
    let kind = if kind == 0 { SampleKind::Normal } else { SampleKind::Hard };
    match granusim::data::sample_example(&(*dict).inner, p, fine, kind, stream_seed) {
        Ok(s) => {
            let out = std::slice::from_raw_parts_mut(patches_out, buf_len as usize);
            for (dst, src) in out.iter_mut().zip(s.patches.iter()) {
                *dst = *src;
            }
            if !coarse_label_out.is_null() {
                *coarse_label_out = if s.coarse_label == Sign::Plus { 1 } else { -1 };
            }
            GsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Lloyd k-means with deterministic seeding over a row-major n x dim matrix;
/// writes one cluster id per row.
#[no_mangle]
pub unsafe extern "C" fn gs_kmeans(
    data: *const f64,
    n: u64,
    dim: u64,
    k: u64,
    seed: u64,
    max_iters: u64,
    assignments: *mut u64,
    inertia: *mut f64,
) -> GsStatus {
    if data.is_null() || assignments.is_null() {
        set_error("null argument");
        return GsStatus::NullArgument;
    }
    let slice = std::slice::from_raw_parts(data, (n * dim) as usize);
    let matrix = match ndarray::Array2::from_shape_vec((n as usize, dim as usize), slice.to_vec())
    {
        Ok(m) => m,
        Err(e) => {
            set_error(e.to_string());
            return GsStatus::InvalidArgument;
        }
    };
    match lloyd_kmeans(matrix.view(), k as usize, seed, max_iters as usize) {
        Ok(res) => {
            let out = std::slice::from_raw_parts_mut(assignments, n as usize);
            for (dst, src) in out.iter_mut().zip(&res.assignments) {
                *dst = *src as u64;
            }
            if !inertia.is_null() {
                *inertia = res.inertia;
            }
            GsStatus::Ok
        }
        Err(e) => fail(e),
    }
}

/// Traces a leaf to its level-k ancestor in a child<TAB>parent edge-list
/// file, clamping at the root; copies the label into `out`.
#[no_mangle]
pub unsafe extern "C" fn gs_level_k_label(
    edges_path: *const c_char,
    leaf: *const c_char,
    level: u64,
    out: *mut c_char,
    out_len: size_t,
) -> GsStatus {
    if out.is_null() || out_len == 0 {
        set_error("null or empty output buffer");
        return GsStatus::NullArgument;
    }
    let path = match cstr(edges_path) {
        Ok(p) => p,
        Err(s) => return s,
    };
    let leaf = match cstr(leaf) {
        Ok(l) => l,
        Err(s) => return s,
    };
    let open = || -> granusim::Result<String> {
        let file = std::fs::File::open(path)?;
        let tax = Taxonomy::from_edge_list(std::io::BufReader::new(file))?;
        Ok(level_k_label(&tax, leaf, level as usize)?.to_string())
    };
    match open() {
        Ok(label) => {
            let c = match CString::new(label) {
                Ok(c) => c,
                Err(_) => {
                    set_error("label contains a NUL byte");
                    return GsStatus::InternalError;
                }
            };
            let bytes = c.as_bytes_with_nul();
            if bytes.len() > out_len {
                set_error(format!("output buffer too small: need {}", bytes.len()));
                return GsStatus::ContractViolation;
            }
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), out as *mut u8, bytes.len());
            GsStatus::Ok
        }
        Err(e) => fail(e),
    }
}
