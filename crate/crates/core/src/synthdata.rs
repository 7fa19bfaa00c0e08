//! Procedural three-domain image/caption generator.
//!
//! Domain 0 "general": a smoothed color field with 1–3 saturated blobs;
//! caption = blob count digit + blob color letters left to right.
//! Domain 1 "formula": dark glyphs on a light page, laid out in 8×8 cells
//! along a horizontal band; caption = the glyph string (`var op var [=]`).
//! Domain 2 "chart": a bar chart with k bars, the unique tallest bar drawn
//! in a saturated color; caption = `k#<color letter>`.
//!
//! Every sample is a pure function of (label, seed). Pixels are snapped to
//! f32 precision at generation time so the f32 on-disk records round-trip
//! bit-exactly.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::rng::{mix64, Rng};
use crate::router::ExpertId;
use crate::vision::{resize_image, ImageTensor};

pub const GENERATOR_VERSION: u32 = 1;
pub const DOMAINS: usize = 3;
/// Desk images are a fixed 32×32×3.
pub const IMG: usize = 32;

// ─── Palette and glyphs ──────────────────────────────────────────────────

/// Saturated palette shared by blobs and chart bars: letter ↔ RGB.
pub const COLORS: [(char, [f64; 3]); 6] = [
    ('r', [0.90, 0.10, 0.10]),
    ('g', [0.10, 0.80, 0.15]),
    ('b', [0.15, 0.20, 0.90]),
    ('y', [0.90, 0.85, 0.10]),
    ('m', [0.85, 0.10, 0.85]),
    ('c', [0.10, 0.80, 0.85]),
];

pub fn color_rgb(letter: char) -> Option<[f64; 3]> {
    COLORS.iter().find(|(c, _)| *c == letter).map(|&(_, rgb)| rgb)
}

const VARS: [char; 5] = ['x', 'y', 'z', 'a', 'b'];
const OPS: [char; 3] = ['+', '-', '*'];

/// 6×6 glyph bitmaps; bit (5 − col) of row byte i is pixel (i, col).
const GLYPHS: [(char, [u8; 6]); 9] = [
    ('x', [0b100001, 0b010010, 0b001100, 0b001100, 0b010010, 0b100001]),
    ('y', [0b100001, 0b010010, 0b001100, 0b001000, 0b001000, 0b001000]),
    ('z', [0b111111, 0b000010, 0b000100, 0b001000, 0b010000, 0b111111]),
    ('a', [0b011110, 0b000001, 0b011111, 0b100001, 0b100011, 0b011101]),
    ('b', [0b100000, 0b100000, 0b111110, 0b100001, 0b100001, 0b111110]),
    ('+', [0b001100, 0b001100, 0b111111, 0b111111, 0b001100, 0b001100]),
    ('-', [0b000000, 0b000000, 0b111111, 0b111111, 0b000000, 0b000000]),
    ('*', [0b010010, 0b001100, 0b111111, 0b001100, 0b010010, 0b000000]),
    ('=', [0b000000, 0b111111, 0b000000, 0b000000, 0b111111, 0b000000]),
];

pub fn glyph_bitmap(c: char) -> Option<[u8; 6]> {
    GLYPHS.iter().find(|(g, _)| *g == c).map(|&(_, b)| b)
}

// ─── Samples ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: ImageTensor,
    pub caption: String,
    pub label: ExpertId,
    pub seed: u64,
}

/// Snap to f32 precision (and clamp into the valid pixel range).
fn snap(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) as f32) as f64
}

fn put(px: &mut [f64], y: usize, x: usize, rgb: [f64; 3]) {
    let base = (y * IMG + x) * 3;
    px[base..base + 3].copy_from_slice(&rgb);
}

fn finish(px: Vec<f64>, caption: String, label: ExpertId, seed: u64) -> Sample {
    let data = px.into_iter().map(snap).collect();
    Sample {
        image: ImageTensor::new(IMG, IMG, 3, data),
        caption,
        label,
        seed,
    }
}

/// Generate one sample; a pure function of (label, seed).
pub fn gen_sample(label: ExpertId, seed: u64) -> Sample {
    assert!(label.0 < DOMAINS, "unknown domain {label}");
    let mut rng = Rng::new(seed).derive(1 + label.0 as u64);
    match label.0 {
        0 => gen_general(&mut rng, seed),
        1 => gen_formula(&mut rng, seed),
        _ => gen_chart(&mut rng, seed),
    }
}

fn gen_general(rng: &mut Rng, seed: u64) -> Sample {
    // Smooth backdrop: a 4×4 color field upsampled to full resolution.
    let coarse: Vec<f64> = (0..4 * 4 * 3).map(|_| rng.uniform(0.15, 0.75)).collect();
    let field = resize_image(&ImageTensor::new(4, 4, 3, coarse), IMG, IMG).unwrap();
    let mut px = field.data().to_vec();

    // 1–3 blobs of distinct colors, one per horizontal lane so the
    // left-to-right caption order is unambiguous.
    let k = 1 + rng.below(3);
    let mut palette: Vec<usize> = (0..COLORS.len()).collect();
    let mut caption = String::new();
    caption.push(char::from(b'0' + k as u8));
    for lane in 0..k {
        let ci = palette.remove(rng.below(palette.len()));
        let (letter, rgb) = COLORS[ci];
        caption.push(letter);
        let r = 2 + rng.below(3); // radius 2..=4
        let lo = lane * IMG / k;
        let hi = (lane + 1) * IMG / k;
        let cx = (lo + r) + rng.below((hi - r).saturating_sub(lo + r).max(1));
        let cy = r + 1 + rng.below(IMG - 2 * r - 2);
        for y in cy.saturating_sub(r)..=(cy + r).min(IMG - 1) {
            for x in cx.saturating_sub(r)..=(cx + r).min(IMG - 1) {
                let (dy, dx) = (y as i64 - cy as i64, x as i64 - cx as i64);
                if dy * dy + dx * dx <= (r * r) as i64 {
                    put(&mut px, y, x, rgb);
                }
            }
        }
    }
    finish(px, caption, ExpertId(0), seed)
}

fn gen_formula(rng: &mut Rng, seed: u64) -> Sample {
    // Light page with mild per-pixel gray noise.
    let mut px = vec![0.0; IMG * IMG * 3];
    for p in 0..IMG * IMG {
        let v = 0.86 + rng.uniform(0.0, 0.06);
        px[p * 3..p * 3 + 3].copy_from_slice(&[v, v, v]);
    }
    // var op var, optionally closed by '=': 3 or 4 glyphs in the band.
    let mut caption = String::new();
    caption.push(VARS[rng.below(VARS.len())]);
    caption.push(OPS[rng.below(OPS.len())]);
    caption.push(VARS[rng.below(VARS.len())]);
    if rng.below(2) == 1 {
        caption.push('=');
    }
    // Glyph cells are 8×8, aligned to the formula encoder's patch grid:
    // cell i covers rows 8..16, cols 8i..8i+8, ink in the centered 6×6.
    for (i, c) in caption.chars().enumerate() {
        let bitmap = glyph_bitmap(c).unwrap();
        let (y0, x0) = (8 + 1, i * 8 + 1);
        for (dy, row) in bitmap.iter().enumerate() {
            for dx in 0..6 {
                if (row >> (5 - dx)) & 1 == 1 {
                    put(&mut px, y0 + dy, x0 + dx, [0.08, 0.08, 0.08]);
                }
            }
        }
    }
    finish(px, caption, ExpertId(1), seed)
}

fn gen_chart(rng: &mut Rng, seed: u64) -> Sample {
    // Flat near-white canvas with dark axes.
    let mut px = vec![0.97; IMG * IMG * 3];
    let ink = [0.15, 0.15, 0.15];
    for y in 3..28 {
        put(&mut px, y, 2, ink);
    }
    for x in 2..31 {
        put(&mut px, 27, x, ink);
    }
    // k bars in even slots; the unique tallest one carries the color.
    let k = 2 + rng.below(4); // 2..=5
    let tallest = rng.below(k);
    let ci = rng.below(COLORS.len());
    let (letter, rgb) = COLORS[ci];
    let slot = 28 / k;
    for i in 0..k {
        let h = if i == tallest {
            20 + rng.below(4) // 20..=23
        } else {
            5 + rng.below(12) // 5..=16, strictly shorter
        };
        let fill = if i == tallest { rgb } else { [0.5, 0.5, 0.5] };
        let x0 = 4 + i * slot + 1;
        let x1 = 4 + (i + 1) * slot - 1;
        for y in (27 - h)..27 {
            for x in x0..x1 {
                put(&mut px, y, x, fill);
            }
        }
    }
    let caption = format!("{k}#{letter}");
    finish(px, caption, ExpertId(2), seed)
}

// ─── Caption grammar parsers (ground-truth oracles) ──────────────────────

/// `<k><colors…>` → (blob count, color letters).
pub fn parse_general_caption(caption: &str) -> Result<(usize, Vec<char>)> {
    let mut chars = caption.chars();
    let k = chars
        .next()
        .and_then(|c| c.to_digit(10))
        .ok_or_else(|| Error::Parse {
            path: "<caption>".into(),
            line: 0,
            detail: format!("general caption must start with a count digit: {caption:?}"),
        })? as usize;
    let colors: Vec<char> = chars.collect();
    if colors.len() != k || !colors.iter().all(|&c| color_rgb(c).is_some()) {
        return Err(Error::Parse {
            path: "<caption>".into(),
            line: 0,
            detail: format!("general caption {caption:?} does not list {k} colors"),
        });
    }
    Ok((k, colors))
}

/// `var op var [=]` → the glyph characters.
pub fn parse_formula_caption(caption: &str) -> Result<Vec<char>> {
    let glyphs: Vec<char> = caption.chars().collect();
    let ok = (glyphs.len() == 3 || glyphs.len() == 4)
        && VARS.contains(&glyphs[0])
        && OPS.contains(&glyphs[1])
        && VARS.contains(&glyphs[2])
        && (glyphs.len() == 3 || glyphs[3] == '=');
    if !ok {
        return Err(Error::Parse {
            path: "<caption>".into(),
            line: 0,
            detail: format!("formula caption {caption:?} is not `var op var [=]`"),
        });
    }
    Ok(glyphs)
}

/// `k#<color>` → (bar count, tallest-bar color letter).
pub fn parse_chart_caption(caption: &str) -> Result<(usize, char)> {
    let chars: Vec<char> = caption.chars().collect();
    match chars.as_slice() {
        [k, '#', col] if k.is_ascii_digit() && color_rgb(*col).is_some() => {
            Ok((k.to_digit(10).unwrap() as usize, *col))
        }
        _ => Err(Error::Parse {
            path: "<caption>".into(),
            line: 0,
            detail: format!("chart caption {caption:?} is not `k#<color>`"),
        }),
    }
}

// ─── Manifests ───────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub train_per_class: usize,
    pub heldout_per_class: usize,
}

impl DatasetManifest {
    pub fn desk_default(seed: u64) -> DatasetManifest {
        DatasetManifest {
            version: GENERATOR_VERSION,
            seed,
            train_per_class: 2000,
            heldout_per_class: 500,
        }
    }

    pub fn to_text(&self) -> String {
        format!(
            "version={}\nseed={}\ntrain_per_class={}\nheldout_per_class={}\n",
            self.version, self.seed, self.train_per_class, self.heldout_per_class
        )
    }

    /// Parse the key=value form; `origin` names the source in errors.
    pub fn parse(text: &str, origin: &str) -> Result<DatasetManifest> {
        let mut version = None;
        let mut seed = None;
        let mut train = None;
        let mut heldout = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |detail: String| Error::Parse {
                path: origin.into(),
                line: i + 1,
                detail,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let parse_u64 = |v: &str| {
                v.trim()
                    .parse::<u64>()
                    .map_err(|e| err(format!("bad value for {key}: {e}")))
            };
            match key.trim() {
                "version" => version = Some(parse_u64(value)? as u32),
                "seed" => seed = Some(parse_u64(value)?),
                "train_per_class" => train = Some(parse_u64(value)? as usize),
                "heldout_per_class" => heldout = Some(parse_u64(value)? as usize),
                other => return Err(err(format!("unknown manifest key {other:?}"))),
            }
        }
        let missing = |what: &str| Error::Parse {
            path: origin.into(),
            line: 0,
            detail: format!("missing manifest key {what:?}"),
        };
        let m = DatasetManifest {
            version: version.ok_or_else(|| missing("version"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
            train_per_class: train.ok_or_else(|| missing("train_per_class"))?,
            heldout_per_class: heldout.ok_or_else(|| missing("heldout_per_class"))?,
        };
        if m.version != GENERATOR_VERSION {
            return Err(Error::Parse {
                path: origin.into(),
                line: 0,
                detail: format!(
                    "generator version {} unsupported (this build writes {})",
                    m.version, GENERATOR_VERSION
                ),
            });
        }
        if m.train_per_class == 0 || m.heldout_per_class == 0 {
            return Err(Error::Parse {
                path: origin.into(),
                line: 0,
                detail: "per-class counts must be at least 1".into(),
            });
        }
        Ok(m)
    }
}

/// Unique per-sample seed. The (split, class, index) key is packed into
/// disjoint bit ranges and pushed through bijective mixing, so no two
/// samples of one dataset ever share a seed.
pub fn sample_seed(global: u64, split: u64, label: ExpertId, index: usize) -> u64 {
    let key = (split << 60) | ((label.0 as u64) << 56) | index as u64;
    mix64(global ^ key.wrapping_mul(0x9e3779b97f4a7c15))
}

const SPLIT_TRAIN: u64 = 1;
const SPLIT_HELDOUT: u64 = 2;

fn gen_split(manifest: &DatasetManifest, split: u64, per_class: usize) -> Vec<Sample> {
    let mut out = Vec::with_capacity(per_class * DOMAINS);
    for index in 0..per_class {
        for label in 0..DOMAINS {
            let label = ExpertId(label);
            out.push(gen_sample(
                label,
                sample_seed(manifest.seed, split, label, index),
            ));
        }
    }
    out
}

// ─── Binary records ──────────────────────────────────────────────────────

pub const DATASET_MAGIC: [u8; 4] = *b"VMDS";

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path, e)
}

fn bad_data(path: &Path, detail: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

pub fn write_records(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |bytes: &[u8]| w.write_all(bytes).map_err(|e| io_err(path, e));
    emit(&DATASET_MAGIC)?;
    emit(&GENERATOR_VERSION.to_le_bytes())?;
    emit(&(samples.len() as u64).to_le_bytes())?;
    for s in samples {
        emit(&[s.label.0 as u8])?;
        emit(&s.seed.to_le_bytes())?;
        for dim in [s.image.h, s.image.w, s.image.c] {
            emit(&(dim as u32).to_le_bytes())?;
        }
        emit(&(s.caption.len() as u32).to_le_bytes())?;
        emit(s.caption.as_bytes())?;
        for &v in s.image.data() {
            emit(&(v as f32).to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<Sample>> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = BufReader::new(file);

    fn take<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)
            .map_err(|e| bad_data(path, format!("truncated record: {e}")))?;
        Ok(buf)
    }

    if take::<4>(&mut r, path)? != DATASET_MAGIC {
        return Err(bad_data(path, "not a dataset file (bad magic)"));
    }
    let version = u32::from_le_bytes(take(&mut r, path)?);
    if version != GENERATOR_VERSION {
        return Err(bad_data(path, format!("unsupported dataset version {version}")));
    }
    let count = u64::from_le_bytes(take(&mut r, path)?) as usize;
    let mut samples = Vec::with_capacity(count);
    for _ in 0..count {
        let label = take::<1>(&mut r, path)?[0] as usize;
        if label >= DOMAINS {
            return Err(bad_data(path, format!("record label {label} out of range")));
        }
        let seed = u64::from_le_bytes(take(&mut r, path)?);
        let h = u32::from_le_bytes(take(&mut r, path)?) as usize;
        let w = u32::from_le_bytes(take(&mut r, path)?) as usize;
        let c = u32::from_le_bytes(take(&mut r, path)?) as usize;
        let caplen = u32::from_le_bytes(take(&mut r, path)?) as usize;
        if h * w * c == 0 || h > 4096 || w > 4096 || c > 16 || caplen > 4096 {
            return Err(bad_data(path, "implausible record header"));
        }
        let mut caption = vec![0u8; caplen];
        r.read_exact(&mut caption)
            .map_err(|e| bad_data(path, format!("truncated caption: {e}")))?;
        let caption = String::from_utf8(caption)
            .map_err(|_| bad_data(path, "caption is not valid UTF-8"))?;
        let mut data = Vec::with_capacity(h * w * c);
        for _ in 0..h * w * c {
            data.push(f32::from_le_bytes(take(&mut r, path)?) as f64);
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(bad_data(path, "pixel outside [0,1]"));
        }
        samples.push(Sample {
            image: ImageTensor::new(h, w, c, data),
            caption,
            label: ExpertId(label),
            seed,
        });
    }
    let mut tail = [0u8; 1];
    match r.read(&mut tail) {
        Ok(0) => Ok(samples),
        Ok(_) => Err(bad_data(path, "trailing bytes after final record")),
        Err(e) => Err(io_err(path, e)),
    }
}

// ─── Dataset directories ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: Vec<Sample>,
    pub heldout: Vec<Sample>,
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("manifest.txt")
}

pub fn train_path(dir: &Path) -> PathBuf {
    dir.join("train.bin")
}

pub fn heldout_path(dir: &Path) -> PathBuf {
    dir.join("heldout.bin")
}

/// Generate the full dataset in memory (tests and trainer warm-up paths
/// that do not need the on-disk form).
pub fn gen_in_memory(manifest: &DatasetManifest) -> Dataset {
    Dataset {
        manifest: manifest.clone(),
        train: gen_split(manifest, SPLIT_TRAIN, manifest.train_per_class),
        heldout: gen_split(manifest, SPLIT_HELDOUT, manifest.heldout_per_class),
    }
}

/// Generate and persist the full dataset (manifest + both splits).
pub fn gen_dataset(dir: &Path, manifest: &DatasetManifest) -> Result<Dataset> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let train = gen_split(manifest, SPLIT_TRAIN, manifest.train_per_class);
    let heldout = gen_split(manifest, SPLIT_HELDOUT, manifest.heldout_per_class);
    fs::write(manifest_path(dir), manifest.to_text())
        .map_err(|e| io_err(&manifest_path(dir), e))?;
    write_records(&train_path(dir), &train)?;
    write_records(&heldout_path(dir), &heldout)?;
    Ok(Dataset {
        manifest: manifest.clone(),
        train,
        heldout,
    })
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = manifest_path(dir);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    DatasetManifest::parse(&text, &path.display().to_string())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let train = read_records(&train_path(dir))?;
    let heldout = read_records(&heldout_path(dir))?;
    for (split, samples, expect) in [
        ("train", &train, manifest.train_per_class * DOMAINS),
        ("heldout", &heldout, manifest.heldout_per_class * DOMAINS),
    ] {
        if samples.len() != expect {
            return Err(bad_data(
                dir,
                format!("{split} split has {} records, manifest says {expect}", samples.len()),
            ));
        }
    }
    Ok(Dataset {
        manifest,
        train,
        heldout,
    })
}
