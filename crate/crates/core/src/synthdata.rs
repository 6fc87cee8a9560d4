//! Procedural shape corpus: ellipses, stars and smooth blobs on a square
//! grid, each with a rendered feature stack standing in for learned
//! backbone features.

use std::collections::VecDeque;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{self, DiffError, Tensor};
use crate::environment::{EnvError, FeatureGrid};
use crate::geometry::{BinaryMask, BoundingBox, GeometryError};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("grid size {0} is below the minimum of 32")]
    SizeTooSmall(usize),
    #[error("noise sigma {0} must be finite and non-negative")]
    BadNoise(f64),
    #[error("corpus count must be at least 1")]
    EmptyCorpus,
    #[error("no valid {kind} shape after {attempts} attempts from seed {seed}")]
    Exhausted { kind: ShapeKind, seed: u64, attempts: u32 },
    #[error("unknown shape kind {0:?}")]
    UnknownKind(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error(transparent)]
    Tensor(#[from] DiffError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Ellipse,
    Star,
    Blob,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Ellipse, ShapeKind::Star, ShapeKind::Blob];

    pub fn as_str(self) -> &'static str {
        match self {
            ShapeKind::Ellipse => "ellipse",
            ShapeKind::Star => "star",
            ShapeKind::Blob => "blob",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ShapeKind {
    type Err = SynthError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "ellipse" => Ok(ShapeKind::Ellipse),
            "star" => Ok(ShapeKind::Star),
            "blob" => Ok(ShapeKind::Blob),
            other => Err(SynthError::UnknownKind(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    pub size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
}

impl ShapeSpec {
    pub fn new(kind: ShapeKind, size: usize, seed: u64) -> Self {
        Self {
            kind,
            size,
            seed,
            noise_sigma: 0.05,
            blur_radius: 1,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.size < 32 {
            return Err(SynthError::SizeTooSmall(self.size));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(SynthError::BadNoise(self.noise_sigma));
        }
        Ok(())
    }
}

const MIN_AREA: usize = 64;
const MAX_ATTEMPTS: u32 = 64;

/// A valid mask and its tight box. Invalid draws (too small, split, or
/// holed) are redrawn from the next sub-seed.
pub fn generate_shape(spec: &ShapeSpec) -> Result<(BinaryMask, BoundingBox), SynthError> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(attempt as u64);
        let mask = draw_shape(spec.kind, spec.size, &mut rng)?;
        if mask.count() >= MIN_AREA && component_count(&mask) == 1 && hole_count(&mask) == 0 {
            let bbox = mask.bounding_box().expect("non-empty mask");
            return Ok((mask, bbox));
        }
    }
    Err(SynthError::Exhausted {
        kind: spec.kind,
        seed: spec.seed,
        attempts: MAX_ATTEMPTS,
    })
}

fn draw_shape(kind: ShapeKind, size: usize, rng: &mut ChaCha8Rng) -> Result<BinaryMask, SynthError> {
    let s = size as f64;
    let margin = 0.1 * s;
    match kind {
        ShapeKind::Ellipse => {
            let a = rng.random_range(0.22..0.44) * s;
            let b = a * rng.random_range(0.2..0.5);
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            Ok(ellipse_mask(size, random_center(rng, s, margin + a), a, b, theta)?)
        }
        ShapeKind::Star => {
            let points = rng.random_range(5..=9usize);
            let outer = rng.random_range(0.25..0.42) * s;
            let inner = outer * rng.random_range(0.4..0.7);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            let (cx, cy) = random_center(rng, s, margin + outer);
            let n = 2 * points;
            let verts: Vec<(f64, f64)> = (0..n)
                .map(|i| {
                    let t = phase + std::f64::consts::TAU * i as f64 / n as f64;
                    let r = if i % 2 == 0 { outer } else { inner };
                    (cx + r * t.cos(), cy + r * t.sin())
                })
                .collect();
            Ok(polygon_mask(size, &verts)?)
        }
        ShapeKind::Blob => {
            let r0 = rng.random_range(0.2..0.3) * s;
            let terms: Vec<(f64, f64)> = (2..=6)
                .map(|_| {
                    (
                        rng.random_range(-0.15..=0.15),
                        rng.random_range(0.0..std::f64::consts::TAU),
                    )
                })
                .collect();
            let (cx, cy) = random_center(rng, s, margin + r0 * 1.75);
            let radius = |theta: f64| {
                r0 * (1.0
                    + terms
                        .iter()
                        .enumerate()
                        .map(|(k, (a, phi))| a * ((k + 2) as f64 * theta + phi).cos())
                        .sum::<f64>())
            };
            Ok(BinaryMask::from_fn(size, size, |c, r| {
                let dx = c as f64 + 0.5 - cx;
                let dy = r as f64 + 0.5 - cy;
                dx.hypot(dy) <= radius(dy.atan2(dx))
            })?)
        }
    }
}

fn random_center(rng: &mut ChaCha8Rng, s: f64, pad: f64) -> (f64, f64) {
    let pad = pad.min(s / 2.0);
    let lo = pad;
    let hi = (s - pad).max(lo + 1e-9);
    (rng.random_range(lo..hi), rng.random_range(lo..hi))
}

/// Filled ellipse sampled at pixel centers.
pub fn ellipse_mask(
    size: usize,
    center: (f64, f64),
    a: f64,
    b: f64,
    theta: f64,
) -> Result<BinaryMask, GeometryError> {
    let (sin, cos) = theta.sin_cos();
    BinaryMask::from_fn(size, size, |c, r| {
        let dx = c as f64 + 0.5 - center.0;
        let dy = r as f64 + 0.5 - center.1;
        let u = dx * cos + dy * sin;
        let v = -dx * sin + dy * cos;
        (u / a).powi(2) + (v / b).powi(2) <= 1.0
    })
}

fn polygon_mask(size: usize, verts: &[(f64, f64)]) -> Result<BinaryMask, GeometryError> {
    let pts = verts
        .iter()
        .map(|&(x, y)| crate::geometry::Point::new(x, y))
        .collect();
    crate::geometry::rasterize(&crate::geometry::Contour::new(pts)?, size, size)
}

fn flood(mask: &BinaryMask, value: bool, seeds: &[(usize, usize)], eight: bool, seen: &mut [bool]) {
    let (w, h) = mask.dims();
    let mut queue: VecDeque<(usize, usize)> = VecDeque::new();
    for &(c, r) in seeds {
        if mask.get(c, r) == value && !seen[r * w + c] {
            seen[r * w + c] = true;
            queue.push_back((c, r));
        }
    }
    while let Some((c, r)) = queue.pop_front() {
        for dr in -1i64..=1 {
            for dc in -1i64..=1 {
                if (dr == 0 && dc == 0) || (!eight && dr != 0 && dc != 0) {
                    continue;
                }
                let (nc, nr) = (c as i64 + dc, r as i64 + dr);
                if nc < 0 || nr < 0 || nc >= w as i64 || nr >= h as i64 {
                    continue;
                }
                let (nc, nr) = (nc as usize, nr as usize);
                if mask.get(nc, nr) == value && !seen[nr * w + nc] {
                    seen[nr * w + nc] = true;
                    queue.push_back((nc, nr));
                }
            }
        }
    }
}

/// Number of 8-connected foreground components.
pub fn component_count(mask: &BinaryMask) -> usize {
    let (w, h) = mask.dims();
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for r in 0..h {
        for c in 0..w {
            if mask.get(c, r) && !seen[r * w + c] {
                count += 1;
                flood(mask, true, &[(c, r)], true, &mut seen);
            }
        }
    }
    count
}

/// Number of 4-connected background regions that do not touch the border.
pub fn hole_count(mask: &BinaryMask) -> usize {
    let (w, h) = mask.dims();
    let mut seen = vec![false; w * h];
    let mut border = Vec::new();
    for c in 0..w {
        border.push((c, 0));
        border.push((c, h - 1));
    }
    for r in 0..h {
        border.push((0, r));
        border.push((w - 1, r));
    }
    flood(mask, false, &border, false, &mut seen);
    let mut holes = 0;
    for r in 0..h {
        for c in 0..w {
            if !mask.get(c, r) && !seen[r * w + c] {
                holes += 1;
                flood(mask, false, &[(c, r)], false, &mut seen);
            }
        }
    }
    holes
}

/// Renders the object as a noisy, blurred intensity image and derives
/// `[intensity, d/dx, d/dy, |grad|]` from it.
pub fn make_feature_grid(mask: &BinaryMask, spec: &ShapeSpec) -> Result<FeatureGrid, SynthError> {
    spec.validate()?;
    let (w, h) = mask.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_f00d_cafe_d00d);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut img: Vec<f64> = mask
        .bits()
        .iter()
        .map(|&b| {
            let base = if b { 0.8 } else { 0.2 };
            if spec.noise_sigma > 0.0 {
                base + noise.sample(&mut rng)
            } else {
                base
            }
        })
        .collect();
    if spec.blur_radius > 0 {
        img = box_blur(&img, w, h, spec.blur_radius);
    }
    let at = |c: usize, r: usize| img[r * w + c];
    let mut values = Vec::with_capacity(4 * w * h);
    values.extend_from_slice(&img);
    let mut gx = Vec::with_capacity(w * h);
    let mut gy = Vec::with_capacity(w * h);
    for r in 0..h {
        for c in 0..w {
            let (cl, cr) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (ru, rd) = (r.saturating_sub(1), (r + 1).min(h - 1));
            gx.push((at(cr, r) - at(cl, r)) / (cr - cl).max(1) as f64);
            gy.push((at(c, rd) - at(c, ru)) / (rd - ru).max(1) as f64);
        }
    }
    let mag: Vec<f64> = gx.iter().zip(&gy).map(|(x, y)| x.hypot(*y)).collect();
    values.extend(gx);
    values.extend(gy);
    values.extend(mag);
    Ok(FeatureGrid::new(w, h, 4, values)?)
}

/// Separable mean filter over a `(2r+1)` window, truncated at the border.
fn box_blur(img: &[f64], w: usize, h: usize, radius: usize) -> Vec<f64> {
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                let (pos, len) = if horizontal { (c, w) } else { (r, h) };
                let lo = pos.saturating_sub(radius);
                let hi = (pos + radius).min(len - 1);
                let mut acc = 0.0;
                for k in lo..=hi {
                    acc += if horizontal { src[r * w + k] } else { src[k * w + c] };
                }
                out[r * w + c] = acc / (hi - lo + 1) as f64;
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// A generated object with everything an episode needs.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub kind: ShapeKind,
    pub seed: u64,
    pub mask: BinaryMask,
    pub bbox: BoundingBox,
    pub grid: FeatureGrid,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// How shape kinds are interleaved in a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct KindMix(pub Vec<(ShapeKind, usize)>);

impl KindMix {
    pub fn only(kind: ShapeKind) -> Self {
        Self(vec![(kind, 1)])
    }

    /// Parses `ellipse`, `star:2,blob:1` and similar.
    pub fn parse(s: &str) -> Result<Self, SynthError> {
        let mut out = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, weight) = match part.split_once(':') {
                Some((n, w)) => (
                    n,
                    w.trim()
                        .parse::<usize>()
                        .map_err(|_| SynthError::UnknownKind(part.to_string()))?,
                ),
                None => (part, 1),
            };
            if weight > 0 {
                out.push((name.trim().parse()?, weight));
            }
        }
        if out.is_empty() {
            return Err(SynthError::UnknownKind(s.to_string()));
        }
        Ok(Self(out))
    }

    /// Kind of the `i`-th corpus entry: counts proportional to the weights,
    /// with remainders going to the earlier kinds.
    pub fn assign(&self, count: usize) -> Vec<ShapeKind> {
        let total: usize = self.0.iter().map(|(_, w)| w).sum();
        let mut counts: Vec<usize> = self.0.iter().map(|(_, w)| count * w / total).collect();
        let mut left = count - counts.iter().sum::<usize>();
        for c in counts.iter_mut() {
            if left == 0 {
                break;
            }
            *c += 1;
            left -= 1;
        }
        let mut out = Vec::with_capacity(count);
        let mut cursor = vec![0; counts.len()];
        while out.len() < count {
            for (k, (kind, _)) in self.0.iter().enumerate() {
                if cursor[k] < counts[k] {
                    cursor[k] += 1;
                    out.push(*kind);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub count: usize,
    pub mix: KindMix,
    pub size: usize,
    pub seed: u64,
    pub noise_sigma: f64,
    pub blur_radius: usize,
}

impl CorpusSpec {
    pub fn new(count: usize, mix: KindMix, size: usize, seed: u64) -> Self {
        Self {
            count,
            mix,
            size,
            seed,
            noise_sigma: 0.05,
            blur_radius: 1,
        }
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generates all samples in memory. The lowest-hash fifth of the entries
/// (by a hash of each entry's seed) forms the eval split.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Vec<Sample>, SynthError> {
    if spec.count == 0 {
        return Err(SynthError::EmptyCorpus);
    }
    let kinds = spec.mix.assign(spec.count);
    let seeds: Vec<u64> = (0..spec.count as u64)
        .map(|i| splitmix(spec.seed.wrapping_mul(0x1000_0001).wrapping_add(i)))
        .collect();
    let mut order: Vec<usize> = (0..spec.count).collect();
    order.sort_by_key(|&i| (splitmix(seeds[i] ^ 0xa076_1d64_78bd_642f), i));
    let n_eval = spec.count / 5;
    let mut split = vec![Split::Train; spec.count];
    for &i in &order[..n_eval] {
        split[i] = Split::Eval;
    }
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let shape = ShapeSpec {
            kind: kinds[i],
            size: spec.size,
            seed: seeds[i],
            noise_sigma: spec.noise_sigma,
            blur_radius: spec.blur_radius,
        };
        let (mask, bbox) = generate_shape(&shape)?;
        let grid = make_feature_grid(&mask, &shape)?;
        out.push(Sample {
            id: format!("{:05}", i),
            kind: kinds[i],
            seed: seeds[i],
            mask,
            bbox,
            grid,
            split: split[i],
        });
    }
    Ok(out)
}

pub const MANIFEST_NAME: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "id,kind,seed,mask_path,grid_path,x_min,y_min,x_max,y_max,split";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes masks (PGM), grids (tensor files) and `manifest.csv` into
/// `out_dir`, returning the manifest path.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<PathBuf, SynthError> {
    let samples = generate_corpus(spec)?;
    write_corpus(&samples, out_dir)
}

pub fn write_corpus(samples: &[Sample], out_dir: &Path) -> Result<PathBuf, SynthError> {
    fs::create_dir_all(out_dir.join("masks")).map_err(io_err(out_dir))?;
    fs::create_dir_all(out_dir.join("grids")).map_err(io_err(out_dir))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for s in samples {
        let mask_rel = format!("masks/{}.pgm", s.id);
        let grid_rel = format!("grids/{}.bin", s.id);
        let mask_path = out_dir.join(&mask_rel);
        fs::write(&mask_path, encode_pgm(&s.mask)).map_err(io_err(&mask_path))?;
        save_grid(&out_dir.join(&grid_rel), &s.grid)?;
        manifest.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            s.id,
            s.kind,
            s.seed,
            mask_rel,
            grid_rel,
            s.bbox.x_min,
            s.bbox.y_min,
            s.bbox.x_max,
            s.bbox.y_max,
            s.split.as_str()
        ));
    }
    let path = out_dir.join(MANIFEST_NAME);
    let mut f = fs::File::create(&path).map_err(io_err(&path))?;
    f.write_all(manifest.as_bytes()).map_err(io_err(&path))?;
    Ok(path)
}

/// Reads a corpus back from its manifest; relative paths resolve against
/// the manifest's directory.
pub fn load_corpus(manifest: &Path) -> Result<Vec<Sample>, SynthError> {
    let text = fs::read_to_string(manifest).map_err(io_err(manifest))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let parse_err = |line: usize, msg: String| SynthError::Parse {
        path: manifest.to_path_buf(),
        msg: format!("line {line}: {msg}"),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(parse_err(1, "missing or unexpected header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 10 {
            return Err(parse_err(i + 1, format!("expected 10 fields, got {}", f.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| parse_err(i + 1, format!("{s:?}: {e}")));
        let kind: ShapeKind = f[1].parse()?;
        let seed = f[2].parse::<u64>().map_err(|e| parse_err(i + 1, e.to_string()))?;
        let mask_path = base.join(f[3]);
        let mask = decode_pgm(&fs::read(&mask_path).map_err(io_err(&mask_path))?)
            .map_err(|msg| SynthError::Parse {
                path: mask_path.clone(),
                msg,
            })?;
        let grid = load_grid(&base.join(f[4]))?;
        let bbox = BoundingBox::new(num(f[5])?, num(f[6])?, num(f[7])?, num(f[8])?)?;
        let split = match f[9] {
            "train" => Split::Train,
            "eval" => Split::Eval,
            other => return Err(parse_err(i + 1, format!("unknown split {other:?}"))),
        };
        out.push(Sample {
            id: f[0].to_string(),
            kind,
            seed,
            mask,
            bbox,
            grid,
            split,
        });
    }
    Ok(out)
}

/// Binary portable graymap, 0 for background and 255 for the object.
pub fn encode_pgm(mask: &BinaryMask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend(mask.bits().iter().map(|&b| if b { 255u8 } else { 0 }));
    out
}

pub fn decode_pgm(bytes: &[u8]) -> Result<BinaryMask, String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" {
        return Err(format!("unsupported magic {:?}", fields[0]));
    }
    let dims: Vec<usize> = fields[1..]
        .iter()
        .map(|f| f.parse::<usize>().map_err(|e| format!("{f:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let (w, h, max) = (dims[0], dims[1], dims[2]);
    if max == 0 || max > 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != w * h {
        return Err(format!("expected {} pixels, got {}", w * h, body.len()));
    }
    BinaryMask::from_bits(w, h, body.iter().map(|&v| v as usize * 2 > max).collect())
        .map_err(|e| e.to_string())
}

pub fn save_grid(path: &Path, grid: &FeatureGrid) -> Result<(), SynthError> {
    let t = Tensor::new(
        vec![grid.channels(), grid.height(), grid.width()],
        grid.values().to_vec(),
    )?;
    diffcore::save_tensors(path, &[("grid".to_string(), t)]).map_err(|e| match e {
        DiffError::Io(source) => SynthError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })
}

pub fn load_grid(path: &Path) -> Result<FeatureGrid, SynthError> {
    let mut entries = diffcore::load_tensors(path).map_err(|e| match e {
        DiffError::Io(source) => SynthError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other.into(),
    })?;
    let bad = |msg: &str| SynthError::Parse {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if entries.len() != 1 {
        return Err(bad("expected exactly one tensor"));
    }
    let (_, t) = entries.remove(0);
    let shape = t.shape().to_vec();
    if shape.len() != 3 {
        return Err(bad("grid tensor must have rank 3"));
    }
    Ok(FeatureGrid::new(shape[2], shape[1], shape[0], t.into_data())?)
}
