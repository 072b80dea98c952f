//! Synthetic captioning data: attribute scenes, a closed caption grammar,
//! and deterministic JSONL dataset generation.
//!
//! A scene is a tuple of (object, color, size, context). Its global feature
//! is the concatenation of one-hot attribute blocks, which is injective over
//! scenes; the spatial variant spreads those blocks over location groups,
//! scaled so the mean over locations equals the global vector. References
//! come from sentence templates with synonym choices and always end in the
//! EOS word.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Features;
use crate::vocab::{TokenId, Vocab, EOS_WORD};

pub const OBJECTS: [&str; 10] =
    ["dog", "cat", "bird", "boat", "car", "horse", "duck", "truck", "sheep", "robot"];
pub const COLORS: [&str; 8] =
    ["red", "blue", "green", "yellow", "white", "black", "brown", "gray"];
pub const SIZES: [&str; 4] = ["big", "small", "tiny", "huge"];
pub const CONTEXTS: [&str; 8] =
    ["park", "road", "lake", "field", "barn", "garage", "forest", "market"];

fn object_synonym(word: &str) -> Option<&'static str> {
    match word {
        "dog" => Some("puppy"),
        "cat" => Some("kitten"),
        "boat" => Some("ship"),
        "horse" => Some("pony"),
        _ => None,
    }
}

fn size_synonym(word: &str) -> Option<&'static str> {
    match word {
        "big" => Some("large"),
        "small" => Some("little"),
        _ => None,
    }
}

/// Width of the global feature vector: one slot per attribute value.
pub const FEAT_DIM: usize = OBJECTS.len() + COLORS.len() + SIZES.len() + CONTEXTS.len();

/// Magnitude of the active slot in each one-hot block. Unit-scale features
/// condition the small decoders too weakly to learn the grammar in few
/// epochs; this value keeps toy runs in the minutes range.
pub const FEAT_SCALE: f64 = 3.0;

/// Number of distinct scenes the attribute space supports.
pub const NUM_SCENES: usize = OBJECTS.len() * COLORS.len() * SIZES.len() * CONTEXTS.len();

/// One synthetic scene, indexed into the attribute tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyScene {
    pub object: usize,
    pub color: usize,
    pub size: usize,
    pub context: usize,
}

impl ToyScene {
    pub fn nth(index: usize) -> ToyScene {
        let object = index % OBJECTS.len();
        let rest = index / OBJECTS.len();
        let color = rest % COLORS.len();
        let rest = rest / COLORS.len();
        let size = rest % SIZES.len();
        let context = rest / SIZES.len();
        ToyScene { object, color, size, context }
    }

    /// Concatenated one-hot blocks; injective over scenes.
    pub fn global_feature(&self) -> Vec<f64> {
        let mut f = vec![0.0; FEAT_DIM];
        f[self.object] = FEAT_SCALE;
        f[OBJECTS.len() + self.color] = FEAT_SCALE;
        f[OBJECTS.len() + COLORS.len() + self.size] = FEAT_SCALE;
        f[OBJECTS.len() + COLORS.len() + SIZES.len() + self.context] = FEAT_SCALE;
        f
    }

    /// Per-location features: the four attribute blocks are assigned to four
    /// contiguous location groups, scaled so that the mean over all
    /// locations reproduces the global feature exactly.
    pub fn spatial_features(&self, n_locations: usize) -> Vec<Vec<f64>> {
        assert!(n_locations >= 4, "need at least one location per attribute block");
        let global = self.global_feature();
        let block_ranges = [
            0..OBJECTS.len(),
            OBJECTS.len()..OBJECTS.len() + COLORS.len(),
            OBJECTS.len() + COLORS.len()..OBJECTS.len() + COLORS.len() + SIZES.len(),
            OBJECTS.len() + COLORS.len() + SIZES.len()..FEAT_DIM,
        ];
        let mut locs = vec![vec![0.0; FEAT_DIM]; n_locations];
        for (b, range) in block_ranges.iter().enumerate() {
            let lo = b * n_locations / 4;
            let hi = (b + 1) * n_locations / 4;
            let scale = n_locations as f64 / (hi - lo) as f64;
            for loc in locs.iter_mut().take(hi).skip(lo) {
                for d in range.clone() {
                    loc[d] = global[d] * scale;
                }
            }
        }
        locs
    }

    fn words(&self) -> (&'static str, &'static str, &'static str, &'static str) {
        (OBJECTS[self.object], COLORS[self.color], SIZES[self.size], CONTEXTS[self.context])
    }
}

/// Render one reference sentence for a scene. Template choice and synonym
/// coin-flips come from the caller's RNG; the sentence always ends in EOS.
pub fn render_reference(scene: &ToyScene, rng: &mut ChaCha12Rng) -> Vec<String> {
    let (obj, color, size, ctx) = scene.words();
    let obj = match object_synonym(obj) {
        Some(syn) if rng.random::<f64>() < 0.5 => syn,
        _ => obj,
    };
    let size = match size_synonym(size) {
        Some(syn) if rng.random::<f64>() < 0.5 => syn,
        _ => size,
    };
    let template = rng.random_range(0..5u32);
    let sentence: Vec<&str> = match template {
        0 => vec!["a", size, color, obj, "in", "the", ctx],
        1 => vec!["the", color, obj, "sits", "near", "the", ctx],
        2 => vec!["a", size, obj, "seen", "at", "the", ctx],
        3 => vec!["the", size, color, obj, "stands", "by", "the", ctx],
        _ => vec!["a", color, obj, "rests", "in", "the", ctx],
    };
    let mut words: Vec<String> = sentence.into_iter().map(str::to_string).collect();
    words.push(EOS_WORD.to_string());
    words
}

/// One dataset line: features plus reference sentences as words.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneExample {
    pub id: String,
    pub global: Vec<f64>,
    pub spatial: Vec<Vec<f64>>,
    pub refs: Vec<Vec<String>>,
}

impl SceneExample {
    pub fn features(&self) -> Features {
        Features { global: self.global.clone(), spatial: self.spatial.clone() }
    }

    /// References as token ids under a vocabulary (unknown words to UNK).
    pub fn encoded_refs(&self, vocab: &Vocab) -> Vec<Vec<TokenId>> {
        self.refs.iter().map(|r| vocab.encode(r)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct GenConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub n_locations: usize,
    pub refs_per_scene: usize,
    /// Words seen fewer times than this in the training references map to UNK.
    pub min_count: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_train: 2000,
            n_val: 200,
            n_test: 200,
            n_locations: 9,
            refs_per_scene: 5,
            min_count: 5,
        }
    }
}

/// The three splits plus the vocabulary induced from the training split.
pub struct GeneratedData {
    pub train: Vec<SceneExample>,
    pub val: Vec<SceneExample>,
    pub test: Vec<SceneExample>,
    pub vocab: Vocab,
}

fn scene_rng(seed: u64, index: u64) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&index.to_le_bytes());
    key[16] = 0x5c;
    ChaCha12Rng::from_seed(key)
}

/// Deterministically generate the splits: distinct scenes are shuffled by
/// seed, sliced into train/val/test, and rendered with seeded grammar draws.
pub fn generate(cfg: &GenConfig) -> Result<GeneratedData> {
    let want = cfg.n_train + cfg.n_val + cfg.n_test;
    if cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0 {
        return Err(Error::Config("every split needs at least one example".into()));
    }
    if want > NUM_SCENES {
        return Err(Error::Config(format!(
            "requested {want} scenes but the attribute space has only {NUM_SCENES}"
        )));
    }
    if cfg.refs_per_scene == 0 {
        return Err(Error::Config("need at least one reference per scene".into()));
    }

    let mut order: Vec<usize> = (0..NUM_SCENES).collect();
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    // Fisher-Yates
    for i in (1..order.len()).rev() {
        let j = shuffle_rng.random_range(0..=i);
        order.swap(i, j);
    }

    let make = |ids: &[usize], name: &str| -> Vec<SceneExample> {
        ids.iter()
            .enumerate()
            .map(|(k, &scene_idx)| {
                let scene = ToyScene::nth(scene_idx);
                let mut rng = scene_rng(cfg.seed, scene_idx as u64);
                let refs =
                    (0..cfg.refs_per_scene).map(|_| render_reference(&scene, &mut rng)).collect();
                SceneExample {
                    id: format!("{name}-{k:05}"),
                    global: scene.global_feature(),
                    spatial: scene.spatial_features(cfg.n_locations),
                    refs,
                }
            })
            .collect()
    };

    let train = make(&order[..cfg.n_train], "train");
    let val = make(&order[cfg.n_train..cfg.n_train + cfg.n_val], "val");
    let test = make(&order[cfg.n_train + cfg.n_val..want], "test");

    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for ex in &train {
        for r in &ex.refs {
            for w in r {
                if w != EOS_WORD {
                    *counts.entry(w.clone()).or_insert(0) += 1;
                }
            }
        }
    }
    let vocab = Vocab::from_counts(&counts, cfg.min_count);
    Ok(GeneratedData { train, val, test, vocab })
}

/// File names used inside a dataset directory.
pub const TRAIN_FILE: &str = "train.jsonl";
pub const VAL_FILE: &str = "val.jsonl";
pub const TEST_FILE: &str = "test.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

pub fn write_jsonl(examples: &[SceneExample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for ex in examples {
        out.push_str(
            &serde_json::to_string(ex).map_err(|e| Error::Format(format!("encode: {e}")))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SceneExample>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
        })
        .collect()
}

/// Generate and persist a dataset directory; returns the written paths.
pub fn generate_to_dir(cfg: &GenConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let data = generate(cfg)?;
    let paths = vec![
        dir.join(TRAIN_FILE),
        dir.join(VAL_FILE),
        dir.join(TEST_FILE),
        dir.join(VOCAB_FILE),
    ];
    write_jsonl(&data.train, &paths[0])?;
    write_jsonl(&data.val, &paths[1])?;
    write_jsonl(&data.test, &paths[2])?;
    data.vocab.save(&paths[3])?;
    Ok(paths)
}

/// Load a dataset directory written by [`generate_to_dir`].
pub fn load_dir(dir: &Path) -> Result<GeneratedData> {
    Ok(GeneratedData {
        train: read_jsonl(&dir.join(TRAIN_FILE))?,
        val: read_jsonl(&dir.join(VAL_FILE))?,
        test: read_jsonl(&dir.join(TEST_FILE))?,
        vocab: Vocab::load(&dir.join(VOCAB_FILE))?,
    })
}
