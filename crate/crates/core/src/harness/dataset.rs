//! Synthetic grounded dialogs.
//!
//! Each image is an `N x N` grid where a few cells hold an object with a
//! color, shape and size, written as one-hot channels plus Gaussian noise.
//! A caption names one object; each round asks about an object by shape, by
//! color, or by coreference to the captioned object ("what about it ?"). The
//! answer is the three-token description `color shape size`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use crate::attention::ImageGrid;
use crate::error::{GmaError, Result};
use crate::gmat;
use crate::rng::{chacha, derive_seed};
use crate::tensor::Tensor;

pub const COLORS: [&str; 6] = ["red", "green", "blue", "yellow", "purple", "orange"];
pub const SHAPES: [&str; 6] = ["cube", "sphere", "cone", "cylinder", "torus", "pyramid"];
pub const SIZES: [&str; 4] = ["tiny", "small", "medium", "large"];
const FUNCTION_WORDS: [&str; 9] = ["what", "is", "the", "thing", "about", "it", "?", "there", "a"];

/// Distinct `color shape size` answers.
pub const ANSWER_SPACE: usize = COLORS.len() * SHAPES.len() * SIZES.len();
pub const ANSWER_LEN: usize = 3;

pub type TokenId = u32;

/// Fixed vocabulary: function words, then colors, shapes and sizes.
pub fn vocabulary() -> Vec<&'static str> {
    FUNCTION_WORDS
        .iter()
        .chain(&COLORS)
        .chain(&SHAPES)
        .chain(&SIZES)
        .copied()
        .collect()
}

pub fn vocab_size() -> usize {
    FUNCTION_WORDS.len() + COLORS.len() + SHAPES.len() + SIZES.len()
}

fn word(w: &str) -> TokenId {
    vocabulary().iter().position(|v| *v == w).expect("known word") as TokenId
}

fn color_token(c: usize) -> TokenId {
    (FUNCTION_WORDS.len() + c) as TokenId
}

fn shape_token(s: usize) -> TokenId {
    (FUNCTION_WORDS.len() + COLORS.len() + s) as TokenId
}

fn size_token(s: usize) -> TokenId {
    (FUNCTION_WORDS.len() + COLORS.len() + SHAPES.len() + s) as TokenId
}

pub fn detokenize(tokens: &[TokenId]) -> String {
    let vocab = vocabulary();
    tokens
        .iter()
        .map(|&t| vocab.get(t as usize).copied().unwrap_or("<?>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub cell: usize,
    pub color: usize,
    pub shape: usize,
    pub size: usize,
}

impl ObjectSpec {
    pub fn answer(&self) -> [usize; 3] {
        [self.color, self.shape, self.size]
    }
}

fn answer_tokens(a: [usize; 3]) -> Vec<TokenId> {
    vec![color_token(a[0]), shape_token(a[1]), size_token(a[2])]
}

fn relevance(a: [usize; 3], gt: [usize; 3]) -> f64 {
    a.iter().zip(&gt).filter(|(x, y)| x == y).count() as f64 / 3.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogRound {
    pub question: Vec<TokenId>,
    /// Caption plus every earlier question and answer, one row per round.
    pub history: Vec<Vec<TokenId>>,
    pub options: Vec<Vec<TokenId>>,
    pub gt_index: usize,
    pub relevance: Vec<f64>,
    /// Index into the dialog's objects of the object asked about.
    pub target: usize,
    pub coreference: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogInstance {
    pub id: u64,
    pub image: ImageGrid,
    pub caption: Vec<TokenId>,
    pub caption_object: usize,
    pub objects: Vec<ObjectSpec>,
    pub rounds: Vec<DialogRound>,
}

/// One JSON Lines record; the image lives in a separate GMAT file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogRecord {
    pub id: u64,
    pub image: String,
    pub caption: Vec<TokenId>,
    pub caption_object: usize,
    pub objects: Vec<ObjectSpec>,
    pub rounds: Vec<DialogRound>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn offset(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1 << 32,
            Split::Test => 2 << 32,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = GmaError;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GmaError::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<DialogInstance>,
    pub val: Vec<DialogInstance>,
    pub test: Vec<DialogInstance>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[DialogInstance] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; u1 in (0, 1].
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

fn generate_dialog(cfg: &RunConfig, id: u64, seed: u64) -> Result<DialogInstance> {
    let mut rng = chacha(seed);
    let n = cfg.grid;
    let mut colors: Vec<usize> = (0..COLORS.len()).collect();
    let mut shapes: Vec<usize> = (0..SHAPES.len()).collect();
    let mut cells: Vec<usize> = (0..n * n).collect();
    colors.shuffle(&mut rng);
    shapes.shuffle(&mut rng);
    cells.shuffle(&mut rng);
    let objects: Vec<ObjectSpec> = (0..cfg.objects)
        .map(|i| ObjectSpec {
            cell: cells[i],
            color: colors[i],
            shape: shapes[i],
            size: rng.gen_range(0..SIZES.len()),
        })
        .collect();

    let c = cfg.channels;
    let mut data: Vec<f64> = (0..n * n * c).map(|_| cfg.feature_noise * gaussian(&mut rng)).collect();
    for o in &objects {
        let base = o.cell * c;
        data[base + o.color] += 1.0;
        data[base + COLORS.len() + o.shape] += 1.0;
        data[base + COLORS.len() + SHAPES.len() + o.size] += 1.0;
    }
    let image = ImageGrid::new(Tensor::new(vec![n, n, c], data)?)?;

    let caption_object = rng.gen_range(0..objects.len());
    let co = objects[caption_object];
    let caption = vec![word("there"), word("is"), word("a"), color_token(co.color), shape_token(co.shape)];

    let mut history = vec![caption.clone()];
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for _ in 0..cfg.rounds {
        let coreference = rng.gen_bool(cfg.coreference_prob);
        let (target, question) = if coreference {
            (caption_object, vec![word("what"), word("about"), word("it"), word("?")])
        } else {
            let t = rng.gen_range(0..objects.len());
            let o = objects[t];
            let q = if rng.gen_bool(0.5) {
                vec![word("what"), word("is"), word("the"), shape_token(o.shape), word("?")]
            } else {
                vec![word("what"), word("is"), word("the"), color_token(o.color), word("thing"), word("?")]
            };
            (t, q)
        };
        let gt = objects[target].answer();
        let mut answers: Vec<[usize; 3]> = vec![gt];
        for o in &objects {
            if !answers.contains(&o.answer()) {
                answers.push(o.answer());
            }
        }
        while answers.len() < cfg.option_count {
            let a = [
                rng.gen_range(0..COLORS.len()),
                rng.gen_range(0..SHAPES.len()),
                rng.gen_range(0..SIZES.len()),
            ];
            if !answers.contains(&a) {
                answers.push(a);
            }
        }
        answers.truncate(cfg.option_count);
        answers.shuffle(&mut rng);
        let gt_index = answers.iter().position(|a| *a == gt).expect("gt kept");
        let relevance = answers.iter().map(|&a| relevance(a, gt)).collect();
        let options = answers.iter().map(|&a| answer_tokens(a)).collect();
        rounds.push(DialogRound {
            question: question.clone(),
            history: history.clone(),
            options,
            gt_index,
            relevance,
            target,
            coreference,
        });
        let mut row = question;
        row.extend(answer_tokens(gt));
        history.push(row);
    }
    Ok(DialogInstance {
        id,
        image,
        caption,
        caption_object,
        objects,
        rounds,
    })
}

pub fn generate_split(cfg: &RunConfig, split: Split, count: usize) -> Result<Vec<DialogInstance>> {
    cfg.validate()?;
    (0..count)
        .map(|i| {
            let id = split.offset() + i as u64;
            generate_dialog(cfg, id, derive_seed(cfg.seed, &format!("dialog/{}/{i}", split.name())))
        })
        .collect()
}

/// Deterministic train/val/test splits from the config seed.
pub fn generate_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Ok(Dataset {
        train: generate_split(cfg, Split::Train, cfg.train_dialogs)?,
        val: generate_split(cfg, Split::Val, cfg.val_dialogs)?,
        test: generate_split(cfg, Split::Test, cfg.test_dialogs)?,
    })
}

/// Scores every option by the generator's latent answer: the fraction of
/// attribute words it shares with the true description.
pub fn oracle_scores(dialog: &DialogInstance, round: usize) -> Vec<f64> {
    let r = &dialog.rounds[round];
    let truth = answer_tokens(dialog.objects[r.target].answer());
    r.options
        .iter()
        .map(|o| o.iter().zip(&truth).filter(|(a, b)| a == b).count() as f64 / truth.len() as f64)
        .collect()
}

fn image_path(split: Split, index: usize) -> String {
    format!("images/{}_{index:05}.gmat", split.name())
}

/// Writes `<split>.jsonl` files plus GMAT images under `dir`; returns every
/// written path.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir.join("images"))?;
    let mut written = Vec::new();
    for split in Split::ALL {
        let jsonl = dir.join(format!("{}.jsonl", split.name()));
        let mut out = fs::File::create(&jsonl)?;
        for (i, d) in data.split(split).iter().enumerate() {
            let rel = image_path(split, i);
            let path = dir.join(&rel);
            gmat::save_tensor(&path, d.image.features())?;
            written.push(path);
            let record = DialogRecord {
                id: d.id,
                image: rel,
                caption: d.caption.clone(),
                caption_object: d.caption_object,
                objects: d.objects.clone(),
                rounds: d.rounds.clone(),
            };
            serde_json::to_writer(&mut out, &record)?;
            out.write_all(b"\n")?;
        }
        written.push(jsonl);
    }
    Ok(written)
}

fn check_record(r: &DialogRecord) -> Result<()> {
    let v = vocab_size() as TokenId;
    let bad = |toks: &[TokenId]| toks.iter().any(|&t| t >= v);
    if bad(&r.caption) {
        return Err(GmaError::Format(format!("dialog {}: caption token outside vocabulary", r.id)));
    }
    for (k, round) in r.rounds.iter().enumerate() {
        let n = round.options.len();
        if bad(&round.question) || round.history.iter().any(|h| bad(h)) || round.options.iter().any(|o| bad(o)) {
            return Err(GmaError::Format(format!("dialog {} round {k}: token outside vocabulary", r.id)));
        }
        if round.gt_index >= n || round.relevance.len() != n || round.target >= r.objects.len() {
            return Err(GmaError::Format(format!("dialog {} round {k}: inconsistent option data", r.id)));
        }
        if round.question.is_empty() || round.history.is_empty() || round.options.iter().any(|o| o.len() != ANSWER_LEN) {
            return Err(GmaError::Format(format!("dialog {} round {k}: malformed tokens", r.id)));
        }
    }
    Ok(())
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<DialogInstance>> {
    let file = fs::File::open(dir.join(format!("{}.jsonl", split.name())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DialogRecord = serde_json::from_str(&line).map_err(|e| GmaError::Format(e.to_string()))?;
        check_record(&r)?;
        let image = ImageGrid::new(gmat::load_tensor(dir.join(&r.image))?)?;
        out.push(DialogInstance {
            id: r.id,
            image,
            caption: r.caption,
            caption_object: r.caption_object,
            objects: r.objects,
            rounds: r.rounds,
        });
    }
    Ok(out)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    Ok(Dataset {
        train: load_split(dir, Split::Train)?,
        val: load_split(dir, Split::Val)?,
        test: load_split(dir, Split::Test)?,
    })
}
