//! Deterministic offline backends.
//!
//! Everything here is a pure function of the request (plus a seed): the same
//! prompt always yields the same bytes, on every platform. The mock image
//! generator embeds its prompt in an `iTXt` chunk, which the mock captioner and
//! the hash embedder read back; that is how "what the image shows" survives a
//! round trip through the offline stack.

use std::collections::HashMap;
use std::io::Cursor;
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::store::ImageStore;
use super::{
    sha256_bytes, BackendError, Captioner, Completion, EmbedInput, Embedder, EmbeddingVector, ImageGenerator,
    Space, TextGenerator,
};
use crate::metrics::tokenize;
use crate::plan::{GenerationParams, ImageHandle};

pub const DEFAULT_HASH_DIM: usize = 256;

const PROMPT_KEYWORD: &str = "prompt";

const VOCAB: &[&str] = &[
    "gather", "materials", "cut", "paper", "fold", "edges", "glue", "ribbon", "wrap", "stems", "arrange", "flowers",
    "candy", "bowl", "mix", "flour", "sugar", "butter", "bake", "oven", "cool", "serve", "plate", "water", "rinse",
    "leaves", "press", "shape", "tie", "knot", "measure", "pour", "stir", "heat", "pan", "slice", "fruit", "decorate",
    "basket", "dry",
];

type Responder = dyn Fn(&str) -> String + Send + Sync;

/// Offline LLM. By default emits `Step 1: … Step k: …` with
/// `k = 3 + (digest mod 4)`; [`MockTextGenerator::scripted`] substitutes any
/// pure function of the prompt.
pub struct MockTextGenerator {
    seed: u64,
    id: String,
    responder: Option<Arc<Responder>>,
}

impl MockTextGenerator {
    pub fn new(seed: u64) -> Self {
        MockTextGenerator { seed, id: format!("mock-text(seed={seed})"), responder: None }
    }

    pub fn scripted(id: impl Into<String>, f: impl Fn(&str) -> String + Send + Sync + 'static) -> Self {
        MockTextGenerator { seed: 0, id: id.into(), responder: Some(Arc::new(f)) }
    }

    fn numbered_list(&self, prompt: &str) -> String {
        let digest = sha256_bytes(prompt);
        let k = 3 + (digest[31] % 4) as usize;
        let mut seed_material = digest.to_vec();
        seed_material.extend_from_slice(&self.seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(sha256_bytes(&seed_material));
        (1..=k)
            .map(|i| {
                let n = rng.random_range(4..=8);
                let words: Vec<&str> = (0..n).map(|_| *VOCAB.choose(&mut rng).unwrap()).collect();
                let mut sentence = words.join(" ");
                sentence[..1].make_ascii_uppercase();
                format!("Step {i}: {sentence}.")
            })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

impl TextGenerator for MockTextGenerator {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn complete(&self, prompt: &str, _params: &GenerationParams) -> Result<Completion, BackendError> {
        let text = match &self.responder {
            Some(f) => f(prompt),
            None => self.numbered_list(prompt),
        };
        Ok(Completion::stop(text))
    }
}

/// Writes a block-pattern PNG whose colours derive from the prompt digest.
pub struct MockImageGenerator {
    store: Arc<ImageStore>,
}

impl MockImageGenerator {
    pub fn new(store: Arc<ImageStore>) -> Self {
        MockImageGenerator { store }
    }

    pub fn render(prompt: &str, width: u32, height: u32) -> Result<Vec<u8>, BackendError> {
        let mut rng = ChaCha8Rng::from_seed(sha256_bytes(prompt));
        let palette: Vec<[u8; 3]> = (0..64).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        let mut data = Vec::with_capacity((width * height * 3) as usize);
        for y in 0..height {
            let by = (y * 8 / height) as usize;
            for x in 0..width {
                let bx = (x * 8 / width) as usize;
                data.extend_from_slice(&palette[by * 8 + bx]);
            }
        }
        let mut out = Vec::new();
        {
            let mut enc = png::Encoder::new(&mut out, width, height);
            enc.set_color(png::ColorType::Rgb);
            enc.set_depth(png::BitDepth::Eight);
            enc.add_itxt_chunk(PROMPT_KEYWORD.to_string(), prompt.to_string())
                .map_err(|e| BackendError::Malformed(e.to_string()))?;
            let mut writer = enc.write_header().map_err(|e| BackendError::Malformed(e.to_string()))?;
            writer.write_image_data(&data).map_err(|e| BackendError::Malformed(e.to_string()))?;
        }
        Ok(out)
    }
}

impl ImageGenerator for MockImageGenerator {
    fn id(&self) -> String {
        "mock-image".into()
    }

    fn generate(&self, prompt: &str, width: u32, height: u32) -> Result<ImageHandle, BackendError> {
        let bytes = Self::render(prompt, width, height)?;
        self.store.put(&bytes)
    }

    fn store(&self) -> &Arc<ImageStore> {
        &self.store
    }
}

/// Prompt embedded by [`MockImageGenerator`], if the image came from it.
pub(crate) fn embedded_prompt(bytes: &[u8]) -> Option<String> {
    let decoder = png::Decoder::new(Cursor::new(bytes));
    let reader = decoder.read_info().ok()?;
    let text = reader
        .info()
        .utf8_text
        .iter()
        .find(|c| c.keyword == PROMPT_KEYWORD)
        .and_then(|c| c.get_text().ok());
    text
}

/// Captions are a pure function of the image bytes.
pub struct MockCaptioner {
    store: Arc<ImageStore>,
}

impl MockCaptioner {
    pub fn new(store: Arc<ImageStore>) -> Self {
        MockCaptioner { store }
    }
}

impl Captioner for MockCaptioner {
    fn id(&self) -> String {
        "mock-caption".into()
    }

    fn caption(&self, image: &ImageHandle, _question: &str) -> Result<String, BackendError> {
        let bytes = self.store.read_decodable(image)?;
        let words: Vec<String> = match embedded_prompt(&bytes) {
            Some(p) if !tokenize(&p).is_empty() => tokenize(&p).into_iter().take(12).collect(),
            _ => {
                let mut rng = ChaCha8Rng::from_seed(sha256_bytes(&bytes));
                (0..3).map(|_| VOCAB.choose(&mut rng).unwrap().to_string()).collect()
            }
        };
        Ok(format!("a picture of {}", words.join(" ")))
    }
}

/// Feature-hashing embedder for every space.
///
/// Each token maps to a fixed pseudo-random vector; texts embed as the sum of
/// their token vectors, so shared vocabulary means positive cosine. Images
/// embed as the text of their embedded prompt (joint space), or as a vector
/// derived from their digest.
pub struct HashEmbedder {
    store: Arc<ImageStore>,
    dim: usize,
}

impl HashEmbedder {
    pub fn new(store: Arc<ImageStore>, dim: usize) -> Self {
        HashEmbedder { store, dim }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::from_seed(sha256_bytes(format!("tok:{token}")));
        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn bag(&self, text: &str) -> Vec<f64> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return self.token_vector(text.trim());
        }
        let mut acc = vec![0.0; self.dim];
        for t in &tokens {
            for (a, v) in acc.iter_mut().zip(self.token_vector(t)) {
                *a += v;
            }
        }
        acc
    }
}

impl Embedder for HashEmbedder {
    fn id(&self) -> String {
        format!("hash-embed({})", self.dim)
    }

    fn embed(&self, input: EmbedInput<'_>, space: Space) -> Result<EmbeddingVector, BackendError> {
        let values = match (input, space) {
            (EmbedInput::Text(t), Space::Word) => self.token_vector(&t.trim().to_lowercase()),
            (EmbedInput::Text(t), Space::Sentence | Space::JointText) => self.bag(t),
            (EmbedInput::Image(h), Space::JointImage) => {
                let bytes = self.store.read_decodable(h)?;
                match embedded_prompt(&bytes) {
                    Some(p) => self.bag(&p),
                    None => {
                        let mut rng = ChaCha8Rng::from_seed(sha256_bytes(&bytes));
                        (0..self.dim).map(|_| rng.random_range(-1.0..1.0)).collect()
                    }
                }
            }
            _ => return Err(BackendError::UnsupportedSpace { backend: self.id(), space }),
        };
        Ok(EmbeddingVector { values, space })
    }
}

/// Lookup-table embedder for hand-built test cases. Text keys match exactly;
/// images are keyed by locator.
#[derive(Default)]
pub struct FixtureEmbedder {
    id: String,
    table: HashMap<(Space, String), Vec<f64>>,
}

impl FixtureEmbedder {
    pub fn new(id: impl Into<String>) -> Self {
        FixtureEmbedder { id: id.into(), table: HashMap::new() }
    }

    pub fn with(mut self, space: Space, key: impl Into<String>, values: Vec<f64>) -> Self {
        self.table.insert((space, key.into()), values);
        self
    }

    pub fn insert(&mut self, space: Space, key: impl Into<String>, values: Vec<f64>) {
        self.table.insert((space, key.into()), values);
    }
}

impl Embedder for FixtureEmbedder {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn embed(&self, input: EmbedInput<'_>, space: Space) -> Result<EmbeddingVector, BackendError> {
        let key = match input {
            EmbedInput::Text(t) => t.to_string(),
            EmbedInput::Image(h) => h.locator.clone(),
        };
        self.table
            .get(&(space, key.clone()))
            .map(|v| EmbeddingVector { values: v.clone(), space })
            .ok_or(BackendError::UnknownInput(key))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::parse_step_list;

    #[test]
    fn mock_text_is_a_parseable_list_of_three_to_six() {
        let m = MockTextGenerator::new(1);
        for p in ["a", "b", "How to make tea", "zzz"] {
            let out = m.complete(p, &GenerationParams::default()).unwrap().text;
            let steps = parse_step_list(&out).unwrap();
            let digest = sha256_bytes(p);
            assert_eq!(steps.len(), 3 + (digest[31] % 4) as usize);
        }
    }

    #[test]
    fn mock_text_depends_on_prompt_and_seed_only() {
        let a = MockTextGenerator::new(1);
        let b = MockTextGenerator::new(1);
        let c = MockTextGenerator::new(2);
        let p = GenerationParams::default();
        let hot = GenerationParams { temperature: 0.7, ..Default::default() };
        assert_eq!(a.complete("x", &p).unwrap(), b.complete("x", &hot).unwrap());
        assert_ne!(a.complete("x", &p).unwrap(), c.complete("x", &p).unwrap());
    }

    #[test]
    fn mock_image_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(ImageStore::new(dir.path()).unwrap());
        let g = MockImageGenerator::new(store.clone());
        let h1 = g.generate("put down the wine glass", 512, 512).unwrap();
        let bytes1 = store.read(&h1).unwrap();
        let h2 = g.generate("put down the wine glass", 512, 512).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(bytes1, store.read(&h2).unwrap());
        assert_eq!(bytes1, MockImageGenerator::render("put down the wine glass", 512, 512).unwrap());
        assert_eq!(embedded_prompt(&bytes1).as_deref(), Some("put down the wine glass"));
    }

    #[test]
    fn captions_follow_image_content() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(ImageStore::new(dir.path()).unwrap());
        let g = MockImageGenerator::new(store.clone());
        let c = MockCaptioner::new(store.clone());
        let h = g.generate("Rinse the Leaves", 64, 64).unwrap();
        assert_eq!(c.caption(&h, "q").unwrap(), "a picture of rinse the leaves");
        assert_eq!(c.caption(&h, "q").unwrap(), c.caption(&h, "other").unwrap());
    }

    #[test]
    fn fixture_word_table() {
        let e = FixtureEmbedder::new("fx").with(Space::Word, "cat", vec![0.0, 0.0]).with(
            Space::Word,
            "dog",
            vec![3.0, 4.0],
        );
        assert_eq!(e.embed(EmbedInput::Text("dog"), Space::Word).unwrap().values, vec![3.0, 4.0]);
        assert!(matches!(e.embed(EmbedInput::Text("cow"), Space::Word), Err(BackendError::UnknownInput(_))));
    }

    #[test]
    fn hash_embedder_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(ImageStore::new(dir.path()).unwrap());
        let e = HashEmbedder::new(store, 32);
        let a = e.embed(EmbedInput::Text("mix the flour"), Space::Sentence).unwrap();
        let b = e.embed(EmbedInput::Text("mix the flour"), Space::Sentence).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
    }
}
