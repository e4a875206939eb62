//! Model service contracts and their implementations.
//!
//! Every pipeline stage talks to one of four contracts: [`TextGenerator`],
//! [`ImageGenerator`], [`Captioner`] and [`Embedder`]. [`BackendSuite`]
//! bundles one of each (three embedders, one per feature space family) and
//! enforces the request/response contracts that every implementation shares,
//! so individual clients only deal with transport.

mod mock;
mod remote;
mod replay;
mod store;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::plan::{GenerationParams, ImageHandle};

pub use mock::{
    FixtureEmbedder, HashEmbedder, MockCaptioner, MockImageGenerator, MockTextGenerator, DEFAULT_HASH_DIM,
};
pub use remote::{HttpCaptioner, HttpEmbedder, HttpImageGenerator, OpenAiTextGenerator, RetryPolicy};
pub use replay::{canonical_json, wrap_with_replay, CacheKey, CacheMode, ReplayCache, Replayed, CACHE_MODE_ENV};
pub use store::ImageStore;
pub(crate) use store::write_atomic;

/// Query sent to the captioner for every image plan step.
pub const CAPTION_QUESTION: &str = "what does the image describe";

pub const DEFAULT_IMAGE_SIZE: (u32, u32) = (512, 512);
pub const MIN_IMAGE_SIDE: u32 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("rate limited: {0}")]
    RateLimited(String),
    #[error("backend refused request (status {status}): {message}")]
    Refused { status: u16, message: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("backend `{backend}` does not support the {space} space")]
    UnsupportedSpace { backend: String, space: Space },
    #[error("no embedding for `{0}`")]
    UnknownInput(String),
    #[error("image `{locator}`: {message}")]
    Image { locator: String, message: String },
    #[error("cache miss for {backend}/{digest}")]
    CacheMiss { backend: String, digest: String },
    #[error("cache integrity error in {path}: {message}")]
    CacheIntegrity { path: String, message: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl BackendError {
    /// Errors worth another attempt under the retry policy.
    pub fn is_transient(&self) -> bool {
        matches!(self, BackendError::Transport(_) | BackendError::RateLimited(_))
    }
}

impl From<std::io::Error> for BackendError {
    fn from(e: std::io::Error) -> Self {
        BackendError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
}

impl Completion {
    pub fn stop(text: impl Into<String>) -> Self {
        Completion { text: text.into(), finish_reason: FinishReason::Stop }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Sentence,
    Word,
    JointText,
    JointImage,
}

impl Space {
    pub fn as_str(self) -> &'static str {
        match self {
            Space::Sentence => "sentence",
            Space::Word => "word",
            Space::JointText => "joint_text",
            Space::JointImage => "joint_image",
        }
    }

    pub fn takes_image(self) -> bool {
        self == Space::JointImage
    }
}

impl fmt::Display for Space {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Space {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sentence" => Ok(Space::Sentence),
            "word" => Ok(Space::Word),
            "joint_text" => Ok(Space::JointText),
            "joint_image" => Ok(Space::JointImage),
            other => Err(format!("unknown embedding space `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub space: Space,
}

impl EmbeddingVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub enum EmbedInput<'a> {
    Text(&'a str),
    Image(&'a ImageHandle),
}

pub trait TextGenerator: Send + Sync {
    /// Stable identifier; part of cache paths and plan fingerprints.
    fn id(&self) -> String;
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, BackendError>;
}

pub trait ImageGenerator: Send + Sync {
    fn id(&self) -> String;
    fn generate(&self, prompt: &str, width: u32, height: u32) -> Result<ImageHandle, BackendError>;
    /// Where generated images are persisted.
    fn store(&self) -> &Arc<ImageStore>;
}

pub trait Captioner: Send + Sync {
    fn id(&self) -> String;
    fn caption(&self, image: &ImageHandle, question: &str) -> Result<String, BackendError>;
}

pub trait Embedder: Send + Sync {
    fn id(&self) -> String;
    fn embed(&self, input: EmbedInput<'_>, space: Space) -> Result<EmbeddingVector, BackendError>;
}

impl<T: TextGenerator + ?Sized> TextGenerator for Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, BackendError> {
        (**self).complete(prompt, params)
    }
}

impl<T: ImageGenerator + ?Sized> ImageGenerator for Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn generate(&self, prompt: &str, width: u32, height: u32) -> Result<ImageHandle, BackendError> {
        (**self).generate(prompt, width, height)
    }
    fn store(&self) -> &Arc<ImageStore> {
        (**self).store()
    }
}

impl<T: Captioner + ?Sized> Captioner for Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn caption(&self, image: &ImageHandle, question: &str) -> Result<String, BackendError> {
        (**self).caption(image, question)
    }
}

impl<T: Embedder + ?Sized> Embedder for Arc<T> {
    fn id(&self) -> String {
        (**self).id()
    }
    fn embed(&self, input: EmbedInput<'_>, space: Space) -> Result<EmbeddingVector, BackendError> {
        (**self).embed(input, space)
    }
}

pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

pub(crate) fn sha256_bytes(bytes: impl AsRef<[u8]>) -> [u8; 32] {
    let mut out = [0u8; 32];
    out.copy_from_slice(&Sha256::digest(bytes.as_ref()));
    out
}

/// One client per contract plus the image store they share.
#[derive(Clone)]
pub struct BackendSuite {
    pub text: Arc<dyn TextGenerator>,
    pub image: Arc<dyn ImageGenerator>,
    pub captioner: Arc<dyn Captioner>,
    pub sentence: Arc<dyn Embedder>,
    pub word: Arc<dyn Embedder>,
    pub joint: Arc<dyn Embedder>,
    counters: Vec<(String, Arc<std::sync::atomic::AtomicU64>)>,
}

impl BackendSuite {
    pub fn new(
        text: Arc<dyn TextGenerator>,
        image: Arc<dyn ImageGenerator>,
        captioner: Arc<dyn Captioner>,
        sentence: Arc<dyn Embedder>,
        word: Arc<dyn Embedder>,
        joint: Arc<dyn Embedder>,
    ) -> Self {
        BackendSuite { text, image, captioner, sentence, word, joint, counters: Vec::new() }
    }

    /// Deterministic offline suite. Every client writes to / reads from `store`.
    pub fn mock(store: Arc<ImageStore>, seed: u64) -> Self {
        let embedder = Arc::new(HashEmbedder::new(store.clone(), DEFAULT_HASH_DIM));
        BackendSuite::new(
            Arc::new(MockTextGenerator::new(seed)),
            Arc::new(MockImageGenerator::new(store.clone())),
            Arc::new(MockCaptioner::new(store)),
            embedder.clone(),
            embedder.clone(),
            embedder,
        )
    }

    /// Routes every client through `cache`. Call counters of the wrappers
    /// become visible through [`BackendSuite::call_counts`].
    pub fn with_replay(self, cache: Arc<ReplayCache>) -> Self {
        let text = wrap_with_replay(self.text, cache.clone());
        let store = self.image.store().clone();
        let image = wrap_with_replay(self.image, cache.clone());
        let captioner = wrap_with_replay(self.captioner, cache.clone()).with_store(store.clone());
        let sentence = wrap_with_replay(self.sentence, cache.clone()).with_store(store.clone());
        let word = wrap_with_replay(self.word, cache.clone()).with_store(store.clone());
        let joint = wrap_with_replay(self.joint, cache).with_store(store);
        let counters = vec![
            ("text".to_string(), text.counter()),
            ("image".to_string(), image.counter()),
            ("caption".to_string(), captioner.counter()),
            ("sentence".to_string(), sentence.counter()),
            ("word".to_string(), word.counter()),
            ("joint".to_string(), joint.counter()),
        ];
        BackendSuite {
            text: Arc::new(text),
            image: Arc::new(image),
            captioner: Arc::new(captioner),
            sentence: Arc::new(sentence),
            word: Arc::new(word),
            joint: Arc::new(joint),
            counters,
        }
    }

    pub fn store(&self) -> &Arc<ImageStore> {
        self.image.store()
    }

    /// Calls that reached the underlying backends, per role. Empty unless the
    /// suite was built with [`BackendSuite::with_replay`].
    pub fn call_counts(&self) -> Vec<(String, u64)> {
        self.counters
            .iter()
            .map(|(k, c)| (k.clone(), c.load(std::sync::atomic::Ordering::SeqCst)))
            .collect()
    }

    pub fn total_calls(&self) -> u64 {
        self.call_counts().iter().map(|(_, n)| n).sum()
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "text={};image={};caption={};sentence={};word={};joint={}",
            self.text.id(),
            self.image.id(),
            self.captioner.id(),
            self.sentence.id(),
            self.word.id(),
            self.joint.id()
        )
    }

    pub fn text_complete(&self, prompt: &str, params: &GenerationParams) -> Result<Completion, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::Precondition("empty prompt".into()));
        }
        let completion = self.text.complete(prompt, params)?;
        if completion.finish_reason != FinishReason::Error && completion.text.trim().is_empty() {
            return Ok(Completion { text: String::new(), finish_reason: FinishReason::Error });
        }
        Ok(completion)
    }

    pub fn image_generate(&self, prompt: &str, width: u32, height: u32) -> Result<ImageHandle, BackendError> {
        if prompt.trim().is_empty() {
            return Err(BackendError::Precondition("empty prompt".into()));
        }
        if width < MIN_IMAGE_SIDE || height < MIN_IMAGE_SIDE {
            return Err(BackendError::Precondition(format!(
                "image size {width}x{height} below minimum {MIN_IMAGE_SIDE}"
            )));
        }
        let handle = self.image.generate(prompt, width, height)?;
        if (handle.width, handle.height) != (width, height) {
            return Err(BackendError::Malformed(format!(
                "requested {width}x{height}, got {}x{}",
                handle.width, handle.height
            )));
        }
        Ok(handle)
    }

    pub fn caption(&self, image: &ImageHandle, question: &str) -> Result<String, BackendError> {
        self.store().probe_handle(image)?;
        let caption = self.captioner.caption(image, question)?;
        if caption.trim().is_empty() {
            return Err(BackendError::Malformed("empty caption".into()));
        }
        Ok(caption)
    }

    pub fn embed(&self, input: EmbedInput<'_>, space: Space) -> Result<EmbeddingVector, BackendError> {
        match (input, space.takes_image()) {
            (EmbedInput::Text(t), false) if t.trim().is_empty() => {
                return Err(BackendError::Precondition("empty text".into()))
            }
            (EmbedInput::Text(_), true) | (EmbedInput::Image(_), false) => {
                return Err(BackendError::Precondition(format!("input kind does not match the {space} space")))
            }
            _ => {}
        }
        let embedder = match space {
            Space::Sentence => &self.sentence,
            Space::Word => &self.word,
            Space::JointText | Space::JointImage => &self.joint,
        };
        let v = embedder.embed(input, space)?;
        if v.values.is_empty() || v.values.iter().any(|x| !x.is_finite()) {
            return Err(BackendError::Malformed(format!("non-finite or empty {space} embedding")));
        }
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn suite() -> (tempfile::TempDir, BackendSuite) {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(ImageStore::new(dir.path()).unwrap());
        (dir, BackendSuite::mock(store, 7))
    }

    #[test]
    fn empty_prompt_is_rejected() {
        let (_d, s) = suite();
        assert!(matches!(s.text_complete("", &GenerationParams::default()), Err(BackendError::Precondition(_))));
        assert!(matches!(s.image_generate(" ", 512, 512), Err(BackendError::Precondition(_))));
    }

    #[test]
    fn image_dims_checked() {
        let (_d, s) = suite();
        assert!(matches!(s.image_generate("a cat", 0, 512), Err(BackendError::Precondition(_))));
        let h = s.image_generate("a cat", DEFAULT_IMAGE_SIZE.0, DEFAULT_IMAGE_SIZE.1).unwrap();
        assert_eq!((h.width, h.height), (512, 512));
        let (w, hh, _) = ImageStore::probe(&s.store().path_of(&h)).unwrap();
        assert_eq!((w, hh), (512, 512));
    }

    #[test]
    fn caption_of_missing_file_names_locator() {
        let (_d, s) = suite();
        let ghost = ImageHandle { locator: "images/nope.png".into(), width: 64, height: 64, format: "png".into() };
        let err = s.caption(&ghost, CAPTION_QUESTION).unwrap_err();
        assert!(err.to_string().contains("images/nope.png"), "{err}");
    }

    #[test]
    fn joint_spaces_share_dimension() {
        let (_d, s) = suite();
        let h = s.image_generate("a dog on a beach", 64, 64).unwrap();
        let t = s.embed(EmbedInput::Text("a dog"), Space::JointText).unwrap();
        let i = s.embed(EmbedInput::Image(&h), Space::JointImage).unwrap();
        assert_eq!(t.len(), i.len());
    }

    #[test]
    fn embed_input_kind_must_match_space() {
        let (_d, s) = suite();
        assert!(s.embed(EmbedInput::Text("x"), Space::JointImage).is_err());
        assert!(s.embed(EmbedInput::Text(""), Space::Sentence).is_err());
    }

    #[test]
    fn fingerprint_names_every_role() {
        let (_d, s) = suite();
        let fp = s.fingerprint();
        for role in ["text=", "image=", "caption=", "sentence=", "word=", "joint="] {
            assert!(fp.contains(role));
        }
    }
}
