//! Record/replay cache for backend calls.
//!
//! Layout: `{cache_dir}/{backend_id}/{request_digest}.record`, one JSON object
//! per file holding the canonical request, the response and a checksum over
//! both. Records are never silently re-fetched: a checksum mismatch is an
//! error in every mode.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use base64::Engine;
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::store::{write_atomic, ImageStore};
use super::{
    sha256_hex, BackendError, Captioner, Completion, EmbedInput, Embedder, EmbeddingVector, ImageGenerator, Space,
    TextGenerator,
};
use crate::plan::{GenerationParams, ImageHandle};

pub const CACHE_MODE_ENV: &str = "PLANWEAVE_CACHE_MODE";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CacheMode {
    /// Always call the backend and (over)write the record.
    Record,
    /// Serve hits from the cache; call and record on a miss.
    #[default]
    Replay,
    /// Serve hits from the cache; a miss is an error.
    StrictReplay,
    /// Bypass the cache entirely.
    Off,
}

impl CacheMode {
    pub fn from_env() -> Result<Option<CacheMode>, String> {
        match std::env::var(CACHE_MODE_ENV) {
            Ok(v) => v.parse().map(Some),
            Err(_) => Ok(None),
        }
    }
}

impl FromStr for CacheMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "record" => Ok(CacheMode::Record),
            "replay" => Ok(CacheMode::Replay),
            "strict-replay" => Ok(CacheMode::StrictReplay),
            "off" => Ok(CacheMode::Off),
            other => Err(format!("unknown cache mode `{other}` (expected record, replay, strict-replay or off)")),
        }
    }
}

impl TryFrom<String> for CacheMode {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<CacheMode> for String {
    fn from(m: CacheMode) -> String {
        m.to_string()
    }
}

impl fmt::Display for CacheMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CacheMode::Record => "record",
            CacheMode::Replay => "replay",
            CacheMode::StrictReplay => "strict-replay",
            CacheMode::Off => "off",
        })
    }
}

/// JSON with object keys sorted at every level and no insignificant whitespace.
pub fn canonical_json(value: &Value) -> String {
    fn write(v: &Value, out: &mut String) {
        match v {
            Value::Object(map) => {
                let mut keys: Vec<&String> = map.keys().collect();
                keys.sort();
                out.push('{');
                for (i, k) in keys.into_iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    out.push_str(&Value::String(k.clone()).to_string());
                    out.push(':');
                    write(&map[k], out);
                }
                out.push('}');
            }
            Value::Array(items) => {
                out.push('[');
                for (i, item) in items.iter().enumerate() {
                    if i > 0 {
                        out.push(',');
                    }
                    write(item, out);
                }
                out.push(']');
            }
            scalar => out.push_str(&scalar.to_string()),
        }
    }
    let mut out = String::new();
    write(value, &mut out);
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub backend_id: String,
    pub request_digest: String,
}

impl CacheKey {
    pub fn new(backend_id: &str, request: &Value) -> Self {
        CacheKey { backend_id: backend_id.to_string(), request_digest: sha256_hex(canonical_json(request)) }
    }
}

#[derive(Serialize, Deserialize)]
struct Record {
    backend_id: String,
    request_digest: String,
    request: Value,
    response: Value,
    checksum: String,
}

fn checksum(request: &Value, response: &Value) -> String {
    sha256_hex(format!("{}\n{}", canonical_json(request), canonical_json(response)))
}

fn sanitize(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' }).collect()
}

pub struct ReplayCache {
    dir: PathBuf,
    mode: CacheMode,
    key_locks: Mutex<HashMap<CacheKey, Arc<Mutex<()>>>>,
}

impl ReplayCache {
    pub fn new(dir: impl Into<PathBuf>, mode: CacheMode) -> std::io::Result<Self> {
        let dir = dir.into();
        if mode != CacheMode::Off {
            fs::create_dir_all(&dir)?;
        }
        Ok(ReplayCache { dir, mode, key_locks: Mutex::new(HashMap::new()) })
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(sanitize(&key.backend_id)).join(format!("{}.record", key.request_digest))
    }

    /// Returns the cached response for `request`, or runs `call` and records
    /// its result, depending on the mode.
    pub fn fetch(
        &self,
        backend_id: &str,
        request: &Value,
        call: impl FnOnce() -> Result<Value, BackendError>,
    ) -> Result<Value, BackendError> {
        if self.mode == CacheMode::Off {
            return call();
        }
        let key = CacheKey::new(backend_id, request);
        let lock = self.key_locks.lock().entry(key.clone()).or_default().clone();
        let _guard = lock.lock();
        let path = self.path_for(&key);

        if self.mode != CacheMode::Record && path.exists() {
            return self.load(&path, &key, request);
        }
        if self.mode == CacheMode::StrictReplay {
            return Err(BackendError::CacheMiss { backend: key.backend_id, digest: key.request_digest });
        }
        let response = call()?;
        let record = Record {
            backend_id: key.backend_id.clone(),
            request_digest: key.request_digest.clone(),
            request: request.clone(),
            checksum: checksum(request, &response),
            response: response.clone(),
        };
        let body = serde_json::to_vec(&record).map_err(|e| BackendError::Io(e.to_string()))?;
        write_atomic(&path, &body)?;
        Ok(response)
    }

    fn load(&self, path: &Path, key: &CacheKey, request: &Value) -> Result<Value, BackendError> {
        let integrity = |message: String| BackendError::CacheIntegrity { path: path.display().to_string(), message };
        let bytes = fs::read(path)?;
        let record: Record = serde_json::from_slice(&bytes).map_err(|e| integrity(e.to_string()))?;
        if record.checksum != checksum(&record.request, &record.response) {
            return Err(integrity("checksum mismatch".into()));
        }
        if record.request_digest != key.request_digest || canonical_json(&record.request) != canonical_json(request) {
            return Err(integrity("record does not match request".into()));
        }
        Ok(record.response)
    }
}

/// A backend routed through a [`ReplayCache`]. Counts the calls that actually
/// reached the wrapped backend.
pub struct Replayed<B> {
    inner: B,
    cache: Arc<ReplayCache>,
    calls: Arc<AtomicU64>,
    store: Option<Arc<ImageStore>>,
}

pub fn wrap_with_replay<B>(backend: B, cache: Arc<ReplayCache>) -> Replayed<B> {
    Replayed { inner: backend, cache, calls: Arc::new(AtomicU64::new(0)), store: None }
}

impl<B> Replayed<B> {
    /// Key image inputs by the digest of their bytes in `store` rather than by locator.
    pub fn with_store(mut self, store: Arc<ImageStore>) -> Self {
        self.store = Some(store);
        self
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn counter(&self) -> Arc<AtomicU64> {
        self.calls.clone()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    fn counted<T>(&self, f: impl FnOnce() -> Result<T, BackendError>) -> Result<T, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        f()
    }
}

fn decode<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, BackendError> {
    serde_json::from_value(v).map_err(|e| BackendError::Malformed(format!("cached response: {e}")))
}

fn encode<T: Serialize>(v: &T) -> Result<Value, BackendError> {
    serde_json::to_value(v).map_err(|e| BackendError::Malformed(e.to_string()))
}

impl<T: TextGenerator> TextGenerator for Replayed<T> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, BackendError> {
        let request = json!({
            "kind": "text",
            "prompt": prompt,
            "temperature": params.temperature,
            "max_tokens": params.max_tokens,
            "seed": params.seed,
        });
        let v = self.cache.fetch(&self.inner.id(), &request, || {
            self.counted(|| self.inner.complete(prompt, params)).and_then(|c| encode(&c))
        })?;
        decode(v)
    }
}

#[derive(Serialize, Deserialize)]
struct ImageResponse {
    handle: ImageHandle,
    image_b64: String,
}

impl<T: ImageGenerator> ImageGenerator for Replayed<T> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn generate(&self, prompt: &str, width: u32, height: u32) -> Result<ImageHandle, BackendError> {
        let request = json!({"kind": "image", "prompt": prompt, "width": width, "height": height});
        let v = self.cache.fetch(&self.inner.id(), &request, || {
            let handle = self.counted(|| self.inner.generate(prompt, width, height))?;
            let bytes = self.inner.store().read(&handle)?;
            encode(&ImageResponse { handle, image_b64: base64::engine::general_purpose::STANDARD.encode(bytes) })
        })?;
        let resp: ImageResponse = decode(v)?;
        let path = self.store().path_of(&resp.handle);
        if !path.exists() {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(&resp.image_b64)
                .map_err(|e| BackendError::Malformed(e.to_string()))?;
            let restored = self.store().put(&bytes)?;
            if restored != resp.handle {
                return Err(BackendError::CacheIntegrity {
                    path: resp.handle.locator,
                    message: "cached image does not match its handle".into(),
                });
            }
        }
        Ok(resp.handle)
    }

    fn store(&self) -> &Arc<ImageStore> {
        self.inner.store()
    }
}

fn image_digest(store: Option<&ImageStore>, image: &ImageHandle) -> Result<String, BackendError> {
    match store {
        Some(store) => Ok(sha256_hex(store.read(image)?)),
        // store-produced locators already carry the content digest
        None => Ok(image.locator.clone()),
    }
}

impl<T: Captioner> Captioner for Replayed<T> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn caption(&self, image: &ImageHandle, question: &str) -> Result<String, BackendError> {
        let request =
            json!({"kind": "caption", "image": image_digest(self.store.as_deref(), image)?, "question": question});
        let v = self.cache.fetch(&self.inner.id(), &request, || {
            self.counted(|| self.inner.caption(image, question)).map(|c| json!({ "caption": c }))
        })?;
        v.get("caption")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| BackendError::Malformed("cached caption".into()))
    }
}

impl<T: Embedder> Embedder for Replayed<T> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn embed(&self, input: EmbedInput<'_>, space: Space) -> Result<EmbeddingVector, BackendError> {
        let request = match input {
            EmbedInput::Text(t) => json!({"kind": "embed", "space": space.as_str(), "text": t}),
            EmbedInput::Image(h) => {
                json!({"kind": "embed", "space": space.as_str(), "image": image_digest(self.store.as_deref(), h)?})
            }
        };
        let v = self.cache.fetch(&self.inner.id(), &request, || {
            self.counted(|| self.inner.embed(input, space)).and_then(|e| encode(&e))
        })?;
        decode(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{MockImageGenerator, MockTextGenerator};

    fn params() -> GenerationParams {
        GenerationParams::default()
    }

    #[test]
    fn second_identical_call_is_replayed() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ReplayCache::new(dir.path(), CacheMode::Replay).unwrap());
        let r = wrap_with_replay(MockTextGenerator::new(3), cache);
        let a = r.complete("How to fold a crane", &params()).unwrap();
        let b = r.complete("How to fold a crane", &params()).unwrap();
        assert_eq!(a, b);
        assert_eq!(r.calls(), 1);
    }

    #[test]
    fn first_use_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ReplayCache::new(dir.path(), CacheMode::Replay).unwrap());
        let plain = MockTextGenerator::new(3);
        let r = wrap_with_replay(MockTextGenerator::new(3), cache);
        assert_eq!(r.complete("p", &params()).unwrap(), plain.complete("p", &params()).unwrap());
    }

    #[test]
    fn strict_replay_miss_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ReplayCache::new(dir.path(), CacheMode::StrictReplay).unwrap());
        let r = wrap_with_replay(MockTextGenerator::new(3), cache);
        let err = r.complete("unseen", &params()).unwrap_err();
        assert!(matches!(err, BackendError::CacheMiss { .. }));
        assert!(err.to_string().contains("cache miss"));
        assert_eq!(r.calls(), 0);
    }

    #[test]
    fn edited_record_fails_integrity() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ReplayCache::new(dir.path(), CacheMode::Replay).unwrap());
        let r = wrap_with_replay(MockTextGenerator::new(3), cache.clone());
        r.complete("p", &params()).unwrap();
        let record = walk(dir.path()).into_iter().find(|p| p.extension().is_some_and(|e| e == "record")).unwrap();
        let text = fs::read_to_string(&record).unwrap().replace("Step 1", "Step 9");
        fs::write(&record, text).unwrap();
        let err = r.complete("p", &params()).unwrap_err();
        assert!(matches!(err, BackendError::CacheIntegrity { .. }), "{err}");
        assert_eq!(r.calls(), 1);

        fs::write(&record, "{not json").unwrap();
        assert!(matches!(r.complete("p", &params()), Err(BackendError::CacheIntegrity { .. })));
    }

    #[test]
    fn record_mode_always_calls() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ReplayCache::new(dir.path(), CacheMode::Record).unwrap());
        let r = wrap_with_replay(MockTextGenerator::new(3), cache);
        r.complete("p", &params()).unwrap();
        r.complete("p", &params()).unwrap();
        assert_eq!(r.calls(), 2);
    }

    #[test]
    fn layout_is_backend_then_digest() {
        let dir = tempfile::tempdir().unwrap();
        let cache = Arc::new(ReplayCache::new(dir.path(), CacheMode::Replay).unwrap());
        let r = wrap_with_replay(MockTextGenerator::new(3), cache.clone());
        r.complete("p", &params()).unwrap();
        let request = json!({"kind": "text", "prompt": "p", "temperature": 0.0, "max_tokens": 512, "seed": null});
        let key = CacheKey::new("mock-text(seed=3)", &request);
        let path = cache.path_for(&key);
        assert!(path.exists(), "{}", path.display());
        assert_eq!(path.parent().unwrap().file_name().unwrap(), "mock-text_seed_3_");
    }

    #[test]
    fn replayed_image_restores_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(ImageStore::new(dir.path().join("out")).unwrap());
        let cache = Arc::new(ReplayCache::new(dir.path().join("cache"), CacheMode::Replay).unwrap());
        let r = wrap_with_replay(MockImageGenerator::new(store.clone()), cache);
        let h = r.generate("a kite", 64, 64).unwrap();
        fs::remove_file(store.path_of(&h)).unwrap();
        let h2 = r.generate("a kite", 64, 64).unwrap();
        assert_eq!(h, h2);
        assert!(store.path_of(&h).exists());
        assert_eq!(r.calls(), 1);
    }

    #[test]
    fn env_mode_parsing() {
        assert_eq!("strict-replay".parse::<CacheMode>().unwrap(), CacheMode::StrictReplay);
        assert!("sometimes".parse::<CacheMode>().is_err());
        for m in [CacheMode::Record, CacheMode::Replay, CacheMode::StrictReplay, CacheMode::Off] {
            assert_eq!(m.to_string().parse::<CacheMode>().unwrap(), m);
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_json() -> impl Strategy<Value = Value> {
            let leaf = prop_oneof![
                Just(Value::Null),
                any::<bool>().prop_map(Value::Bool),
                any::<i32>().prop_map(|i| json!(i)),
                "[a-z ]{0,6}".prop_map(Value::String),
            ];
            leaf.prop_recursive(3, 24, 4, |inner| {
                prop_oneof![
                    prop::collection::vec(inner.clone(), 0..4).prop_map(Value::Array),
                    prop::collection::btree_map("[a-f]{1,3}", inner, 0..4)
                        .prop_map(|m| Value::Object(m.into_iter().collect())),
                ]
            })
        }

        fn reorder(v: &Value) -> String {
            // Reverse key order and pretty-print: a different text for the same value.
            fn rev(v: &Value) -> String {
                match v {
                    Value::Object(m) => {
                        let mut keys: Vec<&String> = m.keys().collect();
                        keys.sort();
                        keys.reverse();
                        let parts: Vec<String> =
                            keys.iter().map(|k| format!("\n  {} :  {}", Value::String((*k).clone()), rev(&m[*k]))).collect();
                        format!("{{ {} }}", parts.join(" ,"))
                    }
                    Value::Array(a) => format!("[ {} ]", a.iter().map(rev).collect::<Vec<_>>().join(" , ")),
                    s => s.to_string(),
                }
            }
            rev(v)
        }

        proptest! {
            #[test]
            fn key_ignores_field_order_and_whitespace(v in arb_json()) {
                let reparsed: Value = serde_json::from_str(&reorder(&v)).unwrap();
                prop_assert_eq!(CacheKey::new("b", &v), CacheKey::new("b", &reparsed));
            }
        }
    }
}
