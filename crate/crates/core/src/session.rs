//! In-memory editing sessions.
//!
//! Each session owns a canvas, its codec latent and the list of edits that
//! produced it. Edits on one session are serialized: a second request while
//! one is running fails with [`Error::Busy`]. Distinct sessions share the
//! model read-only and can run concurrently.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock, TryLockError};

use serde::{Deserialize, Serialize};

use crate::diffusion::{SamplerOpts, StepTick};
use crate::error::{Error, Result};
use crate::model::LazyModel;
use crate::pipeline::{apply_edit, EditOutcome, EditRequest, Telemetry};
use crate::raster::{LatentImage, Mask, MaskRle, RgbImage};

/// Gray level of a blank canvas.
pub const BLANK_GRAY: f64 = 0.5;

pub type SessionId = String;

#[derive(Debug, Clone)]
pub enum CanvasInit {
    Blank,
    Image(RgbImage),
}

/// One applied edit: everything needed to replay it, plus what it cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub mask: MaskRle,
    pub label: usize,
    pub opts: SamplerOpts,
    pub telemetry: Telemetry,
}

#[derive(Debug, Clone)]
pub struct EditSession {
    pub id: SessionId,
    pub initial: RgbImage,
    pub canvas: RgbImage,
    pub latent: LatentImage,
    pub history: Vec<EditRecord>,
}

/// Snapshot returned by [`SessionManager::get_state`].
#[derive(Debug, Clone)]
pub struct SessionState {
    pub id: SessionId,
    pub canvas: RgbImage,
    pub history: Vec<EditRecord>,
}

/// JSON-exportable history, enough to rebuild the canvas.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryExport {
    pub size: usize,
    /// Starting canvas as base64 little-endian f64 values in channel,
    /// row, column order. Lossless, unlike PNG. Absent for a blank start.
    pub initial_f64: Option<String>,
    pub edits: Vec<EditRecord>,
}

pub struct SessionManager {
    model: Arc<LazyModel>,
    sessions: RwLock<HashMap<SessionId, Arc<Mutex<EditSession>>>>,
    next: AtomicU64,
}

impl SessionManager {
    pub fn new(model: Arc<LazyModel>) -> Self {
        Self {
            model,
            sessions: RwLock::new(HashMap::new()),
            next: AtomicU64::new(1),
        }
    }

    pub fn model(&self) -> &LazyModel {
        &self.model
    }

    pub fn create(&self, size: usize, init: CanvasInit) -> Result<SessionId> {
        let want = self.model.config.canvas;
        if size != want {
            return Err(Error::Config(format!("canvas size {size} unsupported, the model uses {want}")));
        }
        let initial = match init {
            CanvasInit::Blank => RgbImage::filled(3, size, size, BLANK_GRAY),
            CanvasInit::Image(img) => {
                if img.channels != 3 || img.height != size || img.width != size {
                    return Err(Error::Shape(format!(
                        "uploaded image is {}x{}x{}, expected 3x{size}x{size}",
                        img.channels, img.height, img.width
                    )));
                }
                img.ensure_finite()?;
                img
            }
        };
        let latent = self.model.codec().encode(&initial)?;
        let id = format!("s{:06}", self.next.fetch_add(1, Ordering::Relaxed));
        let session = EditSession {
            id: id.clone(),
            canvas: initial.clone(),
            initial,
            latent,
            history: Vec::new(),
        };
        self.sessions
            .write()
            .expect("session map poisoned")
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(id)
    }

    fn handle(&self, id: &str) -> Result<Arc<Mutex<EditSession>>> {
        self.sessions
            .read()
            .expect("session map poisoned")
            .get(id)
            .cloned()
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.handle(id).is_ok()
    }

    /// Runs one edit on the session's current canvas and returns its index
    /// in the history. The session is locked for the duration; a concurrent
    /// call on the same session gets [`Error::Busy`].
    pub fn apply_edit(
        &self,
        id: &str,
        mask: &Mask,
        label: usize,
        opts: SamplerOpts,
        on_step: &mut dyn FnMut(StepTick),
    ) -> Result<(usize, EditOutcome)> {
        let handle = self.handle(id)?;
        let mut session = match handle.try_lock() {
            Ok(s) => s,
            Err(TryLockError::WouldBlock) => return Err(Error::Busy(id.to_string())),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        let req = EditRequest {
            mask: mask.clone(),
            label,
            opts,
        };
        let out = apply_edit(&self.model, &session.canvas, &req, on_step)?;
        session.latent = self.model.codec().encode(&out.canvas)?;
        session.canvas = out.canvas.clone();
        session.history.push(EditRecord {
            mask: mask.to_rle(),
            label,
            opts,
            telemetry: out.telemetry.clone(),
        });
        Ok((session.history.len() - 1, out))
    }

    fn with_session<T>(&self, id: &str, f: impl FnOnce(&EditSession) -> T) -> Result<T> {
        let handle = self.handle(id)?;
        let guard = match handle.try_lock() {
            Ok(s) => s,
            Err(TryLockError::WouldBlock) => return Err(Error::Busy(id.to_string())),
            Err(TryLockError::Poisoned(p)) => p.into_inner(),
        };
        Ok(f(&guard))
    }

    pub fn get_state(&self, id: &str) -> Result<SessionState> {
        self.with_session(id, |s| SessionState {
            id: s.id.clone(),
            canvas: s.canvas.clone(),
            history: s.history.clone(),
        })
    }

    pub fn latent(&self, id: &str) -> Result<LatentImage> {
        self.with_session(id, |s| s.latent.clone())
    }

    pub fn telemetry(&self, id: &str) -> Result<Vec<Telemetry>> {
        self.with_session(id, |s| s.history.iter().map(|r| r.telemetry.clone()).collect())
    }

    pub fn export_history(&self, id: &str) -> Result<HistoryExport> {
        use base64::Engine as _;
        let (initial, edits) = self.with_session(id, |s| (s.initial.clone(), s.history.clone()))?;
        let blank = RgbImage::filled(3, initial.height, initial.width, BLANK_GRAY);
        let initial_f64 = if initial == blank {
            None
        } else {
            let bytes: Vec<u8> = initial.data.iter().flat_map(|v| v.to_le_bytes()).collect();
            Some(base64::engine::general_purpose::STANDARD.encode(bytes))
        };
        Ok(HistoryExport {
            size: initial.height,
            initial_f64,
            edits,
        })
    }

    /// Builds a fresh session from an exported history by re-running every
    /// edit. With a deterministic sampler the result equals the source
    /// canvas bit for bit.
    pub fn replay(&self, export: &HistoryExport) -> Result<SessionId> {
        use base64::Engine as _;
        let init = match &export.initial_f64 {
            None => CanvasInit::Blank,
            Some(b64) => {
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(b64)
                    .map_err(|e| Error::Invalid(format!("initial_f64: {e}")))?;
                let n = 3 * export.size * export.size;
                if bytes.len() != 8 * n {
                    return Err(Error::Shape(format!("initial_f64 holds {} bytes, expected {}", bytes.len(), 8 * n)));
                }
                let data = bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
                    .collect::<Vec<_>>();
                CanvasInit::Image(RgbImage::from_fn(3, export.size, export.size, |ch, y, x| {
                    data[(ch * export.size + y) * export.size + x]
                }))
            }
        };
        let id = self.create(export.size, init)?;
        for rec in &export.edits {
            self.apply_edit(&id, &Mask::from_rle(&rec.mask)?, rec.label, rec.opts, &mut |_| {})?;
        }
        Ok(id)
    }

    /// Replays a live session's history onto its own starting canvas.
    pub fn replay_session(&self, id: &str) -> Result<SessionId> {
        let (initial, edits) = self.with_session(id, |s| (s.initial.clone(), s.history.clone()))?;
        let new = self.create(initial.height, CanvasInit::Image(initial))?;
        for rec in &edits {
            self.apply_edit(&new, &Mask::from_rle(&rec.mask)?, rec.label, rec.opts, &mut |_| {})?;
        }
        Ok(new)
    }

    pub fn remove(&self, id: &str) -> Result<()> {
        self.sessions
            .write()
            .expect("session map poisoned")
            .remove(id)
            .map(|_| ())
            .ok_or_else(|| Error::UnknownSession(id.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::Variant;
    use crate::model::ModelConfig;

    fn manager() -> SessionManager {
        SessionManager::new(Arc::new(LazyModel::new(ModelConfig::toy(Variant::ConcatHidden), 3).unwrap()))
    }

    fn opts(seed: u64) -> SamplerOpts {
        SamplerOpts {
            steps: 4,
            seed,
            ..SamplerOpts::default()
        }
    }

    #[test]
    fn blank_sessions_are_gray_and_independent() {
        let m = manager();
        let a = m.create(32, CanvasInit::Blank).unwrap();
        let b = m.create(32, CanvasInit::Blank).unwrap();
        assert_ne!(a, b);
        let s = m.get_state(&a).unwrap();
        assert!(s.history.is_empty());
        assert!(s.canvas.data.iter().all(|&v| v == BLANK_GRAY));
        let mask = Mask::from_fn(32, 32, |y, x| y < 8 && x < 8);
        m.apply_edit(&a, &mask, 1, opts(0), &mut |_| {}).unwrap();
        assert_eq!(m.get_state(&a).unwrap().history.len(), 1);
        assert!(m.get_state(&b).unwrap().history.is_empty());
        assert!(m.create(16, CanvasInit::Blank).is_err());
    }

    #[test]
    fn errors() {
        let m = manager();
        let a = m.create(32, CanvasInit::Blank).unwrap();
        assert!(matches!(m.get_state("nope"), Err(Error::UnknownSession(_))));
        assert!(matches!(
            m.apply_edit(&a, &Mask::empty(32, 32), 0, opts(0), &mut |_| {}),
            Err(Error::EmptyHole)
        ));
        assert!(m.get_state(&a).unwrap().history.is_empty());
    }

    #[test]
    fn busy_while_editing() {
        let m = manager();
        let a = m.create(32, CanvasInit::Blank).unwrap();
        let mask = Mask::from_fn(32, 32, |y, _| y < 4);
        let mut inner = None;
        m.apply_edit(&a, &mask, 0, opts(1), &mut |_| {
            if inner.is_none() {
                inner = Some(m.get_state(&a).map(|_| ()));
            }
        })
        .unwrap();
        assert!(matches!(inner, Some(Err(Error::Busy(_)))));
    }

    #[test]
    fn replay_and_latent_consistency() {
        let m = manager();
        let a = m.create(32, CanvasInit::Blank).unwrap();
        for (i, (y0, x0)) in [(0, 0), (10, 12), (20, 4)].into_iter().enumerate() {
            let mask = Mask::from_fn(32, 32, |y, x| (y0..y0 + 9).contains(&y) && (x0..x0 + 11).contains(&x));
            m.apply_edit(&a, &mask, i % 4, opts(i as u64), &mut |_| {}).unwrap();
        }
        let state = m.get_state(&a).unwrap();
        assert_eq!(m.latent(&a).unwrap(), m.model().codec().encode(&state.canvas).unwrap());

        let export = m.export_history(&a).unwrap();
        let json = serde_json::to_string(&export).unwrap();
        let back: HistoryExport = serde_json::from_str(&json).unwrap();
        let r = m.replay(&back).unwrap();
        assert_eq!(m.get_state(&r).unwrap().canvas, state.canvas);
        let r2 = m.replay_session(&a).unwrap();
        assert_eq!(m.get_state(&r2).unwrap().canvas, state.canvas);
        assert_eq!(m.telemetry(&a).unwrap().len(), 3);
    }

    #[test]
    fn replay_is_lossless_for_any_start() {
        let m = manager();
        let img = RgbImage::from_fn(3, 32, 32, |c, y, x| (0.1 * (c + y) as f64 + 0.013 * x as f64).sin().abs());
        let a = m.create(32, CanvasInit::Image(img)).unwrap();
        m.apply_edit(&a, &Mask::from_fn(32, 32, |y, x| y > 20 && x < 9), 3, opts(5), &mut |_| {}).unwrap();
        let export = m.export_history(&a).unwrap();
        assert!(export.initial_f64.is_some());
        let r = m.replay(&export).unwrap();
        assert_eq!(m.get_state(&r).unwrap().canvas, m.get_state(&a).unwrap().canvas);
        let bad = HistoryExport { initial_f64: Some("AAAA".into()), ..export };
        assert!(m.replay(&bad).is_err());
    }
}
