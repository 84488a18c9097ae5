//! C ABI for the hierakey simulator.
//!
//! All handles are opaque and owned by the caller once returned; free them
//! with the matching `*_free` function. Strings are NUL-terminated UTF-8.
//! Every fallible call returns an [`HkStatus`]; the message for the most
//! recent failure on the calling thread is available from
//! [`hk_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use hierakey::cli;
use hierakey::crypto;
use hierakey::hierarchy::{ta_setup, EntityId, HierarchyError, KeystoreError, Role, Topology};
use hierakey::simnet::{SimError, Simulator, DEFAULT_LABEL};
use hierakey::wire;

#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum HkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    Hierarchy = 4,
    Protocol = 5,
    Io = 6,
    Format = 7,
    BufferTooSmall = 8,
    Parse = 9,
    Panic = 10,
}

/// Opaque simulator handle.
pub struct HkSim {
    sim: Simulator,
}

#[repr(C)]
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct HkEstablishResult {
    pub complete: bool,
    /// Wire error code, 0 if none.
    pub error_code: u16,
    pub links: u32,
    pub exchange_msgs: u32,
    pub head_link_msgs: u32,
    pub handshake_msgs: u32,
    pub initiator_aead: u64,
    pub responder_aead: u64,
    pub mediator_aead: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(HkStatus, String);

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        let status = match e {
            SimError::Hierarchy(_) => HkStatus::Hierarchy,
            _ => HkStatus::Protocol,
        };
        Failure(status, e.to_string())
    }
}

impl From<HierarchyError> for Failure {
    fn from(e: HierarchyError) -> Self {
        Failure(HkStatus::Hierarchy, e.to_string())
    }
}

impl From<KeystoreError> for Failure {
    fn from(e: KeystoreError) -> Self {
        match e {
            KeystoreError::Io(_) => Failure(HkStatus::Io, e.to_string()),
            KeystoreError::Format(_) => Failure(HkStatus::Format, e.to_string()),
        }
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> HkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HkStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HkStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure(HkStatus::NullPointer, format!("{what} is null")));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure(HkStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

unsafe fn entity(p: *const c_char, what: &str) -> Result<EntityId, Failure> {
    EntityId::new(text(p, what)?).map_err(|e| Failure(HkStatus::InvalidArgument, e.to_string()))
}

unsafe fn sim_mut<'a>(sim: *mut HkSim) -> Result<&'a mut Simulator, Failure> {
    sim.as_mut().map(|h| &mut h.sim).ok_or_else(|| Failure(HkStatus::NullPointer, "simulator handle is null".into()))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| Failure(HkStatus::NullPointer, format!("{what} is null")))
}

fn role(code: u8) -> Result<Role, Failure> {
    Role::from_code(code).ok_or_else(|| Failure(HkStatus::InvalidArgument, format!("unknown role code {code}")))
}

/// Copies `bytes` into `buf`. `*len` always receives the full size, so a
/// caller can retry after `BufferTooSmall`.
unsafe fn copy_out(bytes: &[u8], buf: *mut u8, cap: usize, len: *mut usize) -> Result<(), Failure> {
    *out(len, "len")? = bytes.len();
    if bytes.len() > cap {
        return Err(Failure(HkStatus::BufferTooSmall, format!("need {} bytes, have {cap}", bytes.len())));
    }
    if !bytes.is_empty() {
        if buf.is_null() {
            return Err(Failure(HkStatus::NullPointer, "buf is null".into()));
        }
        ptr::copy_nonoverlapping(bytes.as_ptr(), buf, bytes.len());
    }
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn hk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread (without NUL) into `buf`.
///
/// # Safety
/// `buf` must be valid for `cap` bytes; `len` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn hk_last_error(buf: *mut u8, cap: usize, len: *mut usize) -> HkStatus {
    let msg = LAST_ERROR.with(|e| e.borrow().clone());
    guard(|| copy_out(msg.as_bytes(), buf, cap, len))
}

/// New simulator with an empty topology. Never returns null.
#[no_mangle]
pub extern "C" fn hk_sim_new(seed: u64, latency: u64) -> *mut HkSim {
    Box::into_raw(Box::new(HkSim { sim: Simulator::new(seed, latency) }))
}

/// # Safety
/// `sim` must come from [`hk_sim_new`] and not be used afterwards. Null is ignored.
#[no_mangle]
pub unsafe extern "C" fn hk_sim_free(sim: *mut HkSim) {
    if !sim.is_null() {
        drop(Box::from_raw(sim));
    }
}

/// Installs a root entity. Role codes: 0 node, 1 cluster head, 2 head, 3 district mediator.
///
/// # Safety
/// `sim` must be a live handle and `id` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn hk_sim_install_root(sim: *mut HkSim, id: *const c_char, role_code: u8) -> HkStatus {
    guard(|| Ok(sim_mut(sim)?.install_root(&entity(id, "id")?, role(role_code)?)?))
}

/// # Safety
/// `sim` must be a live handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hk_sim_register(
    sim: *mut HkSim,
    registrar: *const c_char,
    child: *const c_char,
    role_code: u8,
) -> HkStatus {
    guard(|| {
        Ok(sim_mut(sim)?.register(&entity(registrar, "registrar")?, &entity(child, "child")?, role(role_code)?)?)
    })
}

/// # Safety
/// `sim` must be a live handle; strings must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hk_sim_associate(sim: *mut HkSim, node: *const c_char, ch: *const c_char) -> HkStatus {
    guard(|| Ok(sim_mut(sim)?.associate(&entity(node, "node")?, &entity(ch, "ch")?)?))
}

/// # Safety
/// `sim` must be a live handle; `id` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hk_sim_revoke(sim: *mut HkSim, id: *const c_char) -> HkStatus {
    guard(|| Ok(sim_mut(sim)?.revoke(&entity(id, "id")?)?))
}

/// # Safety
/// `sim` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn hk_sim_seal(sim: *mut HkSim) -> HkStatus {
    guard(|| {
        sim_mut(sim)?.seal_installation();
        Ok(())
    })
}

/// Runs one key establishment. A protocol-level failure is still `Ok`;
/// inspect `result->complete` and `result->error_code`.
///
/// # Safety
/// `sim` must be a live handle, strings NUL-terminated, `result` writable.
#[no_mangle]
pub unsafe extern "C" fn hk_sim_establish(
    sim: *mut HkSim,
    initiator: *const c_char,
    responder: *const c_char,
    result: *mut HkEstablishResult,
) -> HkStatus {
    guard(|| {
        let (a, b) = (entity(initiator, "initiator")?, entity(responder, "responder")?);
        let result = out(result, "result")?;
        let o = sim_mut(sim)?.establish(&a, &b);
        *result = HkEstablishResult {
            complete: o.is_complete(),
            error_code: o.error_code.unwrap_or(0),
            links: o.links().unwrap_or(0) as u32,
            exchange_msgs: o.exchange_msgs as u32,
            head_link_msgs: o.head_link_msgs as u32,
            handshake_msgs: o.handshake_msgs as u32,
            initiator_aead: o.aead_ops(&a),
            responder_aead: o.aead_ops(&b),
            mediator_aead: o.mediator_aead_total(),
        };
        Ok(())
    })
}

/// Sends application bytes over an established session.
///
/// # Safety
/// `sim` must be a live handle, strings NUL-terminated, `payload` valid
/// for `len` bytes and `delivered` writable.
#[no_mangle]
pub unsafe extern "C" fn hk_sim_send(
    sim: *mut HkSim,
    from: *const c_char,
    to: *const c_char,
    payload: *const u8,
    len: usize,
    delivered: *mut bool,
) -> HkStatus {
    guard(|| {
        let (a, b) = (entity(from, "from")?, entity(to, "to")?);
        if payload.is_null() && len > 0 {
            return Err(Failure(HkStatus::NullPointer, "payload is null".into()));
        }
        let bytes = if len == 0 { &[][..] } else { std::slice::from_raw_parts(payload, len) };
        let delivered = out(delivered, "delivered")?;
        *delivered = sim_mut(sim)?.send_traffic(&a, &b, bytes)?;
        Ok(())
    })
}

/// Copies the transcript as tab-separated text (one record per line).
///
/// # Safety
/// `sim` must be a live handle, `buf` valid for `cap` bytes, `len` writable.
#[no_mangle]
pub unsafe extern "C" fn hk_sim_transcript(sim: *mut HkSim, buf: *mut u8, cap: usize, len: *mut usize) -> HkStatus {
    guard(|| {
        let tsv = sim_mut(sim)?.transcript_tsv();
        copy_out(tsv.as_bytes(), buf, cap, len)
    })
}

/// # Safety
/// `sim` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn hk_sim_save_keystore(sim: *mut HkSim, path: *const c_char) -> HkStatus {
    guard(|| Ok(sim_mut(sim)?.topology().save_keystore(Path::new(text(path, "path")?))?))
}

/// Loads a keystore written by [`hk_sim_save_keystore`] and reports its
/// entity and peer-key counts.
///
/// # Safety
/// `path` must be NUL-terminated; the count pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn hk_keystore_counts(
    path: *const c_char,
    entities: *mut usize,
    peer_keys: *mut usize,
) -> HkStatus {
    guard(|| {
        let path = Path::new(text(path, "path")?);
        let params = ta_setup(crypto::DEFAULT_SUITE, DEFAULT_LABEL)?;
        let topo = Topology::load_keystore(path, params)?;
        *out(entities, "entities")? = topo.len();
        *out(peer_keys, "peer_keys")? = topo.peer_keys().count();
        Ok(())
    })
}

/// Checks that `bytes` is one well-formed wire message.
///
/// # Safety
/// `bytes` must be valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hk_wire_check(bytes: *const u8, len: usize) -> HkStatus {
    guard(|| {
        if bytes.is_null() {
            return Err(Failure(HkStatus::NullPointer, "bytes is null".into()));
        }
        let b = std::slice::from_raw_parts(bytes, len);
        wire::decode(b).map(|_| ()).map_err(|e| Failure(HkStatus::Format, e.to_string()))
    })
}

/// Parses and runs a scenario. A scenario whose expectations fail is
/// still `Ok`; `*passed` says whether they all held.
///
/// # Safety
/// `scenario` must be NUL-terminated; `out_dir` may be null; `passed` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hk_run_scenario(
    scenario: *const c_char,
    seed: u64,
    out_dir: *const c_char,
    passed: *mut bool,
) -> HkStatus {
    guard(|| {
        let source = text(scenario, "scenario")?;
        let dir = if out_dir.is_null() { None } else { Some(Path::new(text(out_dir, "out_dir")?)) };
        let passed = out(passed, "passed")?;
        let parsed = cli::parse_scenario("scenario", source).map_err(|e| Failure(HkStatus::Parse, e.to_string()))?;
        let mut run = cli::run(&parsed, seed);
        if let Some(dir) = dir {
            run.write(dir).map_err(|e| Failure(HkStatus::Io, e.to_string()))?;
        }
        *passed = run.report.passed;
        Ok(())
    })
}
