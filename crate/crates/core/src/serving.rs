//! Online inference: a per-user cache of high-level states and open session
//! buffers, driven one interaction at a time.
//!
//! Snapshot layout (little-endian): 8-byte magic `HTCNUSC1`, `u32` version,
//! `u32` high-level layers, `u32` hidden width, `u64` user count, then per
//! user sorted by ID: `u64` user ID, `i64` last activity, `u64` sessions
//! folded in, `u64` state version, layers × hidden `f32` values, `u32` open
//! session length and that many `u64` item IDs.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array1;
use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};

use crate::data::ItemMatrix;
use crate::error::{Error, Result};
use crate::model::{fingerprint, rank_candidates, Checkpoint, HighState, Model, ModelBuffers, Ranked};

pub const SNAPSHOT_MAGIC: &[u8; 8] = b"HTCNUSC1";
pub const SNAPSHOT_VERSION: u32 = 1;

/// A loaded model with its item table and version tag.
pub struct ServingModel {
    pub model: Model<f32>,
    pub buffers: ModelBuffers<f32>,
    pub items: Arc<ItemMatrix<f32>>,
    pub version: String,
}

impl ServingModel {
    pub fn new(ckpt: Checkpoint<f32>, items: Arc<ItemMatrix<f32>>) -> Result<Self> {
        if !ckpt.model.config.architecture.is_hierarchical() {
            return Err(Error::config(format!(
                "{} keeps no session-level state and cannot be served incrementally",
                ckpt.model.config.architecture.name()
            )));
        }
        if items.dim() != ckpt.model.embedding_dim() {
            return Err(Error::config(format!(
                "item table has dimension {}, model expects {}",
                items.dim(),
                ckpt.model.embedding_dim()
            )));
        }
        let version = fingerprint(&Checkpoint::new(ckpt.model.clone(), ckpt.buffers.clone()).to_bytes());
        Ok(ServingModel { model: ckpt.model, buffers: ckpt.buffers, items, version })
    }

    fn state_shape(&self) -> (usize, usize) {
        let s = self.model.start_state().expect("hierarchical");
        (s.layers.len(), s.top().len())
    }

    fn session_matrix(&self, ids: &[u64]) -> Result<ndarray::Array2<f32>> {
        self.items.lookup(ids)
    }
}

/// One user's cached state.
#[derive(Debug, Clone, PartialEq)]
pub struct UserEntry {
    pub state: HighState<f32>,
    pub last_activity: i64,
    pub open_session: Vec<u64>,
    /// Bumped on every mutation.
    pub version: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionAck {
    pub user_id: u64,
    pub new_user: bool,
    pub closed_session: bool,
    pub sessions: u64,
    pub open_session_len: usize,
    pub state_version: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationResponse {
    pub user_id: u64,
    pub items: Vec<Ranked>,
    pub model_version: String,
    pub state_version: u64,
    /// The user was unknown and scored from the start state.
    pub cold_start: bool,
}

#[derive(Default)]
pub struct UserStateCache {
    users: RwLock<HashMap<u64, Arc<Mutex<UserEntry>>>>,
}

impl UserStateCache {
    pub fn len(&self) -> usize {
        self.users.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn get(&self, user: u64) -> Option<Arc<Mutex<UserEntry>>> {
        self.users.read().get(&user).cloned()
    }

    /// Copy of one user's entry.
    pub fn entry(&self, user: u64) -> Option<UserEntry> {
        self.get(user).map(|e| e.lock().clone())
    }

    fn handles(&self) -> Vec<(u64, Arc<Mutex<UserEntry>>)> {
        let mut v: Vec<_> = self.users.read().iter().map(|(&k, e)| (k, e.clone())).collect();
        v.sort_unstable_by_key(|(k, _)| *k);
        v
    }
}

/// The serving engine: an atomically swappable model plus the user cache.
pub struct Recommender {
    model: RwLock<Arc<ServingModel>>,
    cache: UserStateCache,
    idle_threshold: i64,
}

fn close_session(model: &ServingModel, entry: &mut UserEntry) -> Result<()> {
    let items = model.session_matrix(&entry.open_session)?;
    entry.state = model.model.high_update(&entry.state, items.view())?;
    entry.open_session.clear();
    entry.version += 1;
    Ok(())
}

impl Recommender {
    pub fn new(model: ServingModel, idle_threshold: i64) -> Result<Self> {
        if idle_threshold < 0 {
            return Err(Error::config("idle threshold must be non-negative"));
        }
        Ok(Recommender { model: RwLock::new(Arc::new(model)), cache: UserStateCache::default(), idle_threshold })
    }

    pub fn model(&self) -> Arc<ServingModel> {
        self.model.read().clone()
    }

    pub fn cache(&self) -> &UserStateCache {
        &self.cache
    }

    pub fn idle_threshold(&self) -> i64 {
        self.idle_threshold
    }

    /// Replaces the model. Cached states stay valid only if the high-level
    /// shape is unchanged.
    pub fn swap_model(&self, next: ServingModel) -> Result<()> {
        let mut slot = self.model.write();
        if next.state_shape() != slot.state_shape() {
            return Err(Error::config("new model's high-level state shape differs from the cached states"));
        }
        *slot = Arc::new(next);
        Ok(())
    }

    pub fn on_interaction(&self, user_id: u64, item_id: u64, timestamp: i64) -> Result<InteractionAck> {
        let model = self.model();
        if model.items.row_of(item_id).is_none() {
            return Err(Error::MissingItem(item_id));
        }
        let (handle, new_user) = match self.cache.get(user_id) {
            Some(h) => (h, false),
            None => {
                let mut map = self.cache.users.write();
                let mut created = false;
                let h = map
                    .entry(user_id)
                    .or_insert_with(|| {
                        created = true;
                        Arc::new(Mutex::new(UserEntry {
                            state: model.model.start_state().expect("hierarchical"),
                            last_activity: timestamp,
                            open_session: Vec::new(),
                            version: 0,
                        }))
                    })
                    .clone();
                (h, created)
            }
        };
        let mut e = handle.lock();
        if timestamp < e.last_activity {
            return Err(Error::data(format!(
                "user {user_id}: timestamp {timestamp} precedes last activity {}",
                e.last_activity
            )));
        }
        let mut closed = false;
        if !e.open_session.is_empty() && timestamp - e.last_activity > self.idle_threshold {
            close_session(&model, &mut e)?;
            closed = true;
        }
        e.open_session.push(item_id);
        e.last_activity = timestamp;
        e.version += 1;
        Ok(InteractionAck {
            user_id,
            new_user,
            closed_session: closed,
            sessions: e.state.sessions,
            open_session_len: e.open_session.len(),
            state_version: e.version,
        })
    }

    /// Ranks `candidates` for the user's next interaction. Does not modify
    /// the cache.
    pub fn recommend(&self, user_id: u64, candidates: &[u64], k: usize) -> Result<RecommendationResponse> {
        let model = self.model();
        if let Some(&missing) = candidates.iter().find(|&&id| model.items.row_of(id).is_none()) {
            return Err(Error::MissingItem(missing));
        }
        let snapshot = self.cache.entry(user_id);
        let cold = snapshot.is_none();
        let (state, open, version) = match snapshot {
            Some(e) => (e.state, e.open_session, e.version),
            None => (model.model.start_state().expect("hierarchical"), Vec::new(), 0),
        };
        let u = self.user_vector(&model, &state, &open)?;
        let items = rank_candidates(u.view(), candidates, |id| model.items.get(id), k)?;
        Ok(RecommendationResponse {
            user_id,
            items,
            model_version: model.version.clone(),
            state_version: version,
            cold_start: cold,
        })
    }

    fn user_vector(&self, model: &ServingModel, state: &HighState<f32>, open: &[u64]) -> Result<Array1<f32>> {
        let prefix = model.session_matrix(open)?;
        let u = model.model.low_forward(prefix.view(), state, Some(&model.buffers))?;
        if u.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite user vector".into()));
        }
        Ok(u)
    }

    /// Closes every open session idle for longer than the threshold at
    /// `now`. Returns how many were closed; a second call with the same
    /// `now` closes none.
    pub fn close_idle_sessions(&self, now: i64) -> Result<usize> {
        let model = self.model();
        let mut closed = 0;
        for (_, handle) in self.cache.handles() {
            let mut e = handle.lock();
            if !e.open_session.is_empty() && now - e.last_activity > self.idle_threshold {
                close_session(&model, &mut e)?;
                closed += 1;
            }
        }
        Ok(closed)
    }

    pub fn snapshot_bytes(&self) -> Vec<u8> {
        let (layers, hidden) = self.model().state_shape();
        let handles = self.cache.handles();
        let mut out = Vec::new();
        out.extend_from_slice(SNAPSHOT_MAGIC);
        out.extend_from_slice(&SNAPSHOT_VERSION.to_le_bytes());
        out.extend_from_slice(&(layers as u32).to_le_bytes());
        out.extend_from_slice(&(hidden as u32).to_le_bytes());
        out.extend_from_slice(&(handles.len() as u64).to_le_bytes());
        for (id, handle) in handles {
            let e = handle.lock();
            out.extend_from_slice(&id.to_le_bytes());
            out.extend_from_slice(&e.last_activity.to_le_bytes());
            out.extend_from_slice(&e.state.sessions.to_le_bytes());
            out.extend_from_slice(&e.version.to_le_bytes());
            for layer in &e.state.layers {
                for v in layer {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            out.extend_from_slice(&(e.open_session.len() as u32).to_le_bytes());
            for item in &e.open_session {
                out.extend_from_slice(&item.to_le_bytes());
            }
        }
        out
    }

    /// Replaces the cache with the users in a snapshot.
    pub fn load_snapshot_bytes(&self, bytes: &[u8]) -> Result<usize> {
        let (layers, hidden) = self.model().state_shape();
        let mut r = Cursor { bytes, at: 0 };
        if r.take(8)? != SNAPSHOT_MAGIC {
            return Err(Error::Format("not a user-state snapshot".into()));
        }
        let version = r.u32()?;
        if version != SNAPSHOT_VERSION {
            return Err(Error::Format(format!("unsupported snapshot version {version}")));
        }
        if (r.u32()? as usize, r.u32()? as usize) != (layers, hidden) {
            return Err(Error::Format("snapshot state shape does not match the model".into()));
        }
        let count = r.u64()?;
        let mut users = HashMap::new();
        for _ in 0..count {
            let id = r.u64()?;
            let last_activity = r.u64()? as i64;
            let sessions = r.u64()?;
            let version = r.u64()?;
            let mut state_layers = Vec::with_capacity(layers);
            for _ in 0..layers {
                let v = (0..hidden).map(|_| r.u32().map(f32::from_bits)).collect::<Result<Vec<_>>>()?;
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Numeric(format!("snapshot state of user {id} is not finite")));
                }
                state_layers.push(Array1::from(v));
            }
            let open_len = r.u32()? as usize;
            let open_session = (0..open_len).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
            let entry = UserEntry { state: HighState { layers: state_layers, sessions }, last_activity, open_session, version };
            if users.insert(id, Arc::new(Mutex::new(entry))).is_some() {
                return Err(Error::Format(format!("user {id} appears twice in the snapshot")));
            }
        }
        if r.at != bytes.len() {
            return Err(Error::Format("trailing bytes after last user record".into()));
        }
        let n = users.len();
        *self.cache.users.write() = users;
        Ok(n)
    }

    /// Writes the snapshot atomically through a temporary sibling file.
    pub fn save_snapshot(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.snapshot_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_snapshot(&self, path: &Path) -> Result<usize> {
        self.load_snapshot_bytes(&std::fs::read(path)?)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("snapshot truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
