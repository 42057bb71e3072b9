//! Synthetic paired scenes, geometric augmentation, netpbm I/O and the
//! on-disk dataset layout.
//!
//! A scene has a flat background, a road band, a vegetation patch whose
//! texture only the visible camera sees, and one to three hot objects that
//! only the infrared camera sees clearly. The hottest, largest object is the
//! salient one.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of segmentation classes.
pub const NUM_CLASSES: usize = 4;
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_HOT: u8 = 1;
pub const CLASS_ROAD: u8 = 2;
pub const CLASS_VEGETATION: u8 = 3;

/// Single-channel image in `[0, 1]`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::dim(format!("{h}x{w} image with {} values", data.len())));
        }
        Ok(Image { h, w, data })
    }

    pub fn filled(h: usize, w: usize, v: f64) -> Self {
        Image {
            h,
            w,
            data: vec![v; h * w],
        }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Stacks same-sized images into `[B, 1, H, W]`.
    pub fn batch(images: &[&Image]) -> Result<Tensor> {
        let first = images.first().ok_or_else(|| Error::Input("empty batch".into()))?;
        let (h, w) = (first.h, first.w);
        let mut data = Vec::with_capacity(images.len() * h * w);
        for im in images {
            if (im.h, im.w) != (h, w) {
                return Err(Error::Input(format!(
                    "batch mixes {}x{} and {h}x{w} images",
                    im.h, im.w
                )));
            }
            data.extend_from_slice(&im.data);
        }
        Tensor::new(&[images.len(), 1, h, w], data)
    }

    /// Splits `[B, 1, H, W]` back into images.
    pub fn unbatch(t: &Tensor) -> Result<Vec<Image>> {
        let (b, c, h, w) = t.dims4()?;
        if c != 1 {
            return Err(Error::dim(format!("expected one channel, got {c}")));
        }
        Ok((0..b)
            .map(|i| Image {
                h,
                w,
                data: t.data()[i * h * w..(i + 1) * h * w].to_vec(),
            })
            .collect())
    }

    pub fn pixelwise_max(a: &Image, b: &Image) -> Result<Image> {
        if (a.h, a.w) != (b.h, b.w) {
            return Err(Error::dim("pixelwise max of different sizes"));
        }
        Ok(Image {
            h: a.h,
            w: a.w,
            data: a.data.iter().zip(&b.data).map(|(x, y)| x.max(*y)).collect(),
        })
    }
}

/// Per-pixel labels for the three downstream tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub h: usize,
    pub w: usize,
    /// Class index per pixel, `0..NUM_CLASSES`.
    pub seg: Vec<u8>,
    /// Salient-object mask, 0 or 1.
    pub sod: Vec<u8>,
    /// Center heatmap in `[0, 1]`.
    pub det: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub ir: Image,
    pub vis: Image,
    pub gt: GroundTruth,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub h: usize,
    pub w: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub noise_ir: f64,
    pub noise_vis: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            h: 32,
            w: 32,
            min_objects: 1,
            max_objects: 3,
            noise_ir: 0.01,
            noise_vis: 0.01,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.h < 8 || self.w < 8 {
            return Err(Error::Config(format!("scene must be at least 8x8, got {}x{}", self.h, self.w)));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return Err(Error::Config("object count range is empty".into()));
        }
        if !(self.noise_ir >= 0.0 && self.noise_vis >= 0.0) {
            return Err(Error::Config("noise levels must be >= 0".into()));
        }
        Ok(())
    }
}

/// splitmix64 finalizer, used to derive per-sample seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn sample_seed(base: u64, index: u64) -> u64 {
    mix(base ^ mix(index))
}

/// `n` scenes; sample `i` depends only on `(spec, i)`.
pub fn generate(spec: &SceneSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Input("need at least one sample".into()));
    }
    (0..n)
        .map(|i| generate_one(spec, sample_seed(spec.seed, i as u64)))
        .collect()
}

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    heat: f64,
}

impl Blob {
    fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        dy * dy + dx * dx <= 1.0
    }
}

pub fn generate_one(spec: &SceneSpec, seed: u64) -> Result<Sample> {
    spec.validate()?;
    let (h, w) = (spec.h, spec.w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fy = h as f64;
    let fx = w as f64;

    let mut seg = vec![CLASS_BACKGROUND; h * w];
    let mut ir = vec![0.2; h * w];
    let mut vis = vec![0.0; h * w];
    // gentle illumination gradient in the visible band
    let tilt_y = rng.random_range(-0.08..0.08);
    let tilt_x = rng.random_range(-0.08..0.08);
    for y in 0..h {
        for x in 0..w {
            vis[y * w + x] = 0.45 + tilt_y * (y as f64 / fy - 0.5) + tilt_x * (x as f64 / fx - 0.5);
        }
    }

    // road band, horizontal or vertical
    let vertical = rng.random_bool(0.5);
    let extent = if vertical { w } else { h };
    let width = rng.random_range(extent / 6..=extent / 4).max(2);
    let start = rng.random_range(0..=extent - width);
    for y in 0..h {
        for x in 0..w {
            let t = if vertical { x } else { y };
            if t >= start && t < start + width {
                seg[y * w + x] = CLASS_ROAD;
                ir[y * w + x] = 0.15;
                vis[y * w + x] = 0.25;
            }
        }
    }

    // vegetation patch: strong texture in the visible band only
    let vh = rng.random_range(h / 4..=h / 2);
    let vw = rng.random_range(w / 4..=w / 2);
    let vy = rng.random_range(0..=h - vh);
    let vx = rng.random_range(0..=w - vw);
    let period = rng.random_range(2..=3);
    let phase = rng.random_range(0..period);
    for y in vy..vy + vh {
        for x in vx..vx + vw {
            let i = y * w + x;
            seg[i] = CLASS_VEGETATION;
            let on = ((x + y + phase) / period) % 2 == 0;
            vis[i] = if on { 0.75 } else { 0.3 };
            ir[i] = 0.22;
        }
    }

    // hot objects: first one is the salient one (largest, hottest)
    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut blobs = Vec::with_capacity(count);
    for k in 0..count {
        let (rmin, rmax, heat) = if k == 0 {
            (3.0, 4.5, rng.random_range(0.9..1.0))
        } else {
            (1.5, 2.5, rng.random_range(0.6..0.7))
        };
        let ry = rng.random_range(rmin..rmax);
        let rx = rng.random_range(rmin..rmax);
        let cy = rng.random_range(ry..fy - ry);
        let cx = rng.random_range(rx..fx - rx);
        blobs.push(Blob { cy, cx, ry, rx, heat });
    }
    let mut sod = vec![0u8; h * w];
    // paint small objects first so the salient one stays whole on overlap
    for (k, b) in blobs.iter().enumerate().rev() {
        for y in 0..h {
            for x in 0..w {
                if b.contains(y, x) {
                    let i = y * w + x;
                    seg[i] = CLASS_HOT;
                    ir[i] = b.heat;
                    vis[i] += 0.05;
                    sod[i] = u8::from(k == 0);
                }
            }
        }
    }
    let mut det = vec![0.0f64; h * w];
    for b in &blobs {
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - b.cy;
                let dx = x as f64 + 0.5 - b.cx;
                let g = (-(dy * dy + dx * dx) / (2.0 * 2.0 * 2.0)).exp();
                let d = &mut det[y * w + x];
                *d = d.max(g);
            }
        }
    }

    let add_noise = |img: &mut [f64], sigma: f64, rng: &mut ChaCha8Rng| -> Result<()> {
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            for v in img.iter_mut() {
                *v += n.sample(rng);
            }
        }
        img.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(())
    };
    add_noise(&mut ir, spec.noise_ir, &mut rng)?;
    add_noise(&mut vis, spec.noise_vis, &mut rng)?;

    Ok(Sample {
        ir: Image { h, w, data: ir },
        vis: Image { h, w, data: vis },
        gt: GroundTruth { h, w, seg, sod, det },
        seed,
    })
}

/// Geometric transforms applied identically to images and labels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugOp {
    HFlip,
    VFlip,
    /// Quarter turn counter-clockwise.
    Rot90,
    /// Crop of the given size at a seed-chosen offset.
    Crop(usize, usize),
}

fn remap<T: Copy>(src: &[T], h: usize, w: usize, op: AugOp, off: (usize, usize)) -> (Vec<T>, usize, usize) {
    match op {
        AugOp::HFlip => (
            (0..h * w).map(|i| src[(i / w) * w + (w - 1 - i % w)]).collect(),
            h,
            w,
        ),
        AugOp::VFlip => (
            (0..h * w).map(|i| src[(h - 1 - i / w) * w + i % w]).collect(),
            h,
            w,
        ),
        AugOp::Rot90 => {
            // output is w×h; out(y, x) = in(x, w-1-y)
            let (oh, ow) = (w, h);
            (
                (0..oh * ow)
                    .map(|i| {
                        let (y, x) = (i / ow, i % ow);
                        src[x * w + (w - 1 - y)]
                    })
                    .collect(),
                oh,
                ow,
            )
        }
        AugOp::Crop(ch, cw) => (
            (0..ch * cw)
                .map(|i| src[(off.0 + i / cw) * w + off.1 + i % cw])
                .collect(),
            ch,
            cw,
        ),
    }
}

/// Applies `ops` in order; `seed` picks crop offsets.
pub fn augment(sample: &Sample, ops: &[AugOp], seed: u64) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = sample.clone();
    for &op in ops {
        let (h, w) = (s.ir.h, s.ir.w);
        let off = match op {
            AugOp::Crop(ch, cw) => {
                if ch == 0 || cw == 0 || ch > h || cw > w {
                    return Err(Error::dim(format!("cannot crop {ch}x{cw} from {h}x{w}")));
                }
                (rng.random_range(0..=h - ch), rng.random_range(0..=w - cw))
            }
            _ => (0, 0),
        };
        let (ir, nh, nw) = remap(&s.ir.data, h, w, op, off);
        let (vis, _, _) = remap(&s.vis.data, h, w, op, off);
        let (seg, _, _) = remap(&s.gt.seg, h, w, op, off);
        let (sod, _, _) = remap(&s.gt.sod, h, w, op, off);
        let (det, _, _) = remap(&s.gt.det, h, w, op, off);
        s = Sample {
            ir: Image { h: nh, w: nw, data: ir },
            vis: Image { h: nh, w: nw, data: vis },
            gt: GroundTruth { h: nh, w: nw, seg, sod, det },
            seed: s.seed,
        };
    }
    Ok(s)
}

/// Random flips and quarter turns (square images only get turns), plus an
/// optional fixed-size crop.
pub fn random_augment(sample: &Sample, seed: u64, crop: Option<(usize, usize)>) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ops = Vec::new();
    if rng.random_bool(0.5) {
        ops.push(AugOp::HFlip);
    }
    if rng.random_bool(0.5) {
        ops.push(AugOp::VFlip);
    }
    if sample.ir.h == sample.ir.w {
        for _ in 0..rng.random_range(0..4) {
            ops.push(AugOp::Rot90);
        }
    }
    if let Some((ch, cw)) = crop {
        ops.push(AugOp::Crop(ch, cw));
    }
    augment(sample, &ops, rng.random())
}

// ---- netpbm -----------------------------------------------------------------

struct Header {
    magic: [u8; 2],
    w: usize,
    h: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<Header> {
    let bad = |m: &str| Error::Format(format!("{}: {m}", path.display()));
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(bad("not a netpbm file"));
    }
    let magic = [bytes[0], bytes[1]];
    if !matches!(bytes[1], b'5' | b'6') {
        return Err(Error::UnsupportedFormat(format!(
            "{}: only binary P5/P6 is supported, got P{}",
            path.display(),
            bytes[1] as char
        )));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let begin = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if begin == pos {
            return Err(bad("expected a number in header"));
        }
        *f = std::str::from_utf8(&bytes[begin..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("header number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("missing whitespace after maxval"));
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: maxval {maxval}, only 8-bit (255) is supported",
            path.display()
        )));
    }
    if w == 0 || h == 0 {
        return Err(bad("zero image extent"));
    }
    Ok(Header {
        magic,
        w,
        h,
        data_start: pos + 1,
    })
}

/// Raw 8-bit gray levels of a P5 file (or luminance of a P6 file, rounded).
fn read_levels(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::MissingFile(path.to_path_buf()))
        }
        Err(e) => return Err(Error::io(path, e)),
    };
    let hd = parse_header(&bytes, path)?;
    let channels = if hd.magic[1] == b'6' { 3 } else { 1 };
    let need = hd.w * hd.h * channels;
    let payload = &bytes[hd.data_start..];
    if payload.len() < need {
        return Err(Error::Format(format!("{}: truncated pixel data", path.display())));
    }
    let px = &payload[..need];
    let levels = if channels == 1 {
        px.iter().map(|&v| v as f64).collect()
    } else {
        px.chunks_exact(3)
            .map(|c| 0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64)
            .collect()
    };
    Ok((hd.h, hd.w, levels))
}

/// Reads P5 (gray) or P6 (converted to Rec.601 luminance) into `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Image> {
    let (h, w, levels) = read_levels(path)?;
    Ok(Image {
        h,
        w,
        data: levels.into_iter().map(|v| v / 255.0).collect(),
    })
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn write_pgm_bytes(path: &Path, h: usize, w: usize, px: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(px).map_err(|e| Error::io(path, e))
}

/// Writes an 8-bit P5 file, rounding half up.
pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    if img.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite pixel written to {}", path.display())));
    }
    let px: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    write_pgm_bytes(path, img.h, img.w, &px)
}

// ---- dataset directory ------------------------------------------------------

/// `<root>/<split>/<id>_{ir,vis,seg,sod,det}.pgm`.
pub fn sample_paths(dir: &Path, id: &str) -> [PathBuf; 5] {
    ["ir", "vis", "seg", "sod", "det"].map(|k| dir.join(format!("{id}_{k}.pgm")))
}

pub fn write_split(root: &Path, split: &str, samples: &[Sample]) -> Result<Vec<String>> {
    let dir = root.join(split);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut ids = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = format!("{i:05}");
        let [ir, vis, seg, sod, det] = sample_paths(&dir, &id);
        write_image(&ir, &s.ir)?;
        write_image(&vis, &s.vis)?;
        write_pgm_bytes(&seg, s.gt.h, s.gt.w, &s.gt.seg)?;
        let sod_px: Vec<u8> = s.gt.sod.iter().map(|&m| if m > 0 { 255 } else { 0 }).collect();
        write_pgm_bytes(&sod, s.gt.h, s.gt.w, &sod_px)?;
        let det_px: Vec<u8> = s.gt.det.iter().map(|&v| quantize(v)).collect();
        write_pgm_bytes(&det, s.gt.h, s.gt.w, &det_px)?;
        ids.push(id);
    }
    Ok(ids)
}

/// Sorted ids of every `<id>_ir.pgm` in `<root>/<split>`.
pub fn list_ids(root: &Path, split: &str) -> Result<Vec<String>> {
    let dir = root.join(split);
    let entries = fs::read_dir(&dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(dir.clone()),
        _ => Error::io(&dir, e),
    })?;
    let mut ids = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(&dir, err))?;
        let name = e.file_name().to_string_lossy().into_owned();
        if let Some(id) = name.strip_suffix("_ir.pgm") {
            ids.push(id.to_string());
        }
    }
    ids.sort();
    Ok(ids)
}

/// Loads a split. With `with_labels` false only the image pair must exist.
pub fn read_split(root: &Path, split: &str, with_labels: bool) -> Result<Vec<(String, Sample)>> {
    let dir = root.join(split);
    let ids = list_ids(root, split)?;
    if ids.is_empty() {
        return Err(Error::Input(format!("no samples under {}", dir.display())));
    }
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let paths = sample_paths(&dir, &id);
        let n = if with_labels { 5 } else { 2 };
        if let Some(p) = paths[..n].iter().find(|p| !p.exists()) {
            return Err(Error::MissingFile(p.clone()));
        }
        let ir = read_image(&paths[0])?;
        let vis = read_image(&paths[1])?;
        if (ir.h, ir.w) != (vis.h, vis.w) {
            return Err(Error::Input(format!("{id}: infrared and visible sizes differ")));
        }
        let (h, w) = (ir.h, ir.w);
        let gt = if with_labels {
            let label = |p: &Path| -> Result<Vec<f64>> {
                let (lh, lw, v) = read_levels(p)?;
                if (lh, lw) != (h, w) {
                    return Err(Error::Input(format!("{}: label size differs", p.display())));
                }
                Ok(v)
            };
            let seg = label(&paths[2])?;
            if let Some(bad) = seg.iter().find(|&&v| v as usize >= NUM_CLASSES) {
                return Err(Error::Input(format!("{id}: class {bad} out of range")));
            }
            GroundTruth {
                h,
                w,
                seg: seg.iter().map(|&v| v as u8).collect(),
                sod: label(&paths[3])?.iter().map(|&v| u8::from(v > 127.0)).collect(),
                det: label(&paths[4])?.iter().map(|v| v / 255.0).collect(),
            }
        } else {
            GroundTruth {
                h,
                w,
                seg: vec![0; h * w],
                sod: vec![0; h * w],
                det: vec![0.0; h * w],
            }
        };
        out.push((id, Sample { ir, vis, gt, seed: 0 }));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn sobel_energy(img: &Image) -> f64 {
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[1, 1, img.h, img.w], img.data.clone()).unwrap());
        let g = t.spatial_gradient(x).unwrap();
        t.value(g).data().iter().sum()
    }

    #[test]
    fn generation_is_seeded() {
        let spec = SceneSpec { seed: 4, ..SceneSpec::default() };
        assert_eq!(generate(&spec, 5).unwrap(), generate(&spec, 5).unwrap());
        let other = SceneSpec { seed: 5, ..SceneSpec::default() };
        assert_ne!(generate(&spec, 1).unwrap(), generate(&other, 1).unwrap());
    }

    #[test]
    fn labels_in_range_and_salient_present() {
        for s in generate(&SceneSpec::default(), 20).unwrap() {
            assert!(s.gt.seg.iter().all(|&c| (c as usize) < NUM_CLASSES));
            assert!(s.gt.sod.iter().any(|&m| m == 1));
            assert!(s.gt.det.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.ir.data.iter().chain(&s.vis.data).all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn max_image_has_more_edges_than_either_source() {
        let spec = SceneSpec { seed: 99, ..SceneSpec::default() };
        let samples = generate(&spec, 100).unwrap();
        let wins = samples
            .iter()
            .filter(|s| {
                let m = Image::pixelwise_max(&s.ir, &s.vis).unwrap();
                let e = sobel_energy(&m);
                e > sobel_energy(&s.ir) && e > sobel_energy(&s.vis)
            })
            .count();
        assert!(wins >= 95, "{wins}/100");
    }

    #[test]
    fn flips_and_turns_are_group_laws() {
        let s = generate(&SceneSpec::default(), 1).unwrap().remove(0);
        assert_eq!(augment(&s, &[AugOp::HFlip, AugOp::HFlip], 0).unwrap(), s);
        assert_eq!(augment(&s, &[AugOp::VFlip, AugOp::VFlip], 0).unwrap(), s);
        assert_eq!(augment(&s, &[AugOp::Rot90; 4], 0).unwrap(), s);
        assert_ne!(augment(&s, &[AugOp::Rot90], 0).unwrap(), s);
    }

    #[test]
    fn rot90_on_rectangle() {
        let spec = SceneSpec { h: 8, w: 12, ..SceneSpec::default() };
        let s = generate(&spec, 1).unwrap().remove(0);
        let r = augment(&s, &[AugOp::Rot90], 0).unwrap();
        assert_eq!((r.ir.h, r.ir.w), (12, 8));
        assert_eq!(r.ir.at(0, 0), s.ir.at(0, 11));
        assert_eq!(augment(&s, &[AugOp::Rot90; 4], 0).unwrap(), s);
    }

    #[test]
    fn crop_keeps_everything_aligned() {
        let s = generate(&SceneSpec::default(), 1).unwrap().remove(0);
        let c = augment(&s, &[AugOp::Crop(20, 24)], 3).unwrap();
        for len in [c.ir.data.len(), c.vis.data.len(), c.gt.seg.len(), c.gt.sod.len(), c.gt.det.len()] {
            assert_eq!(len, 20 * 24);
        }
        assert!(matches!(augment(&s, &[AugOp::Crop(40, 8)], 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn pgm_round_trip_and_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let mut bytes = b"P5\n# comment\n4 2\n255\n".to_vec();
        bytes.extend(0u8..8);
        fs::write(&p, &bytes).unwrap();
        let img = read_image(&p).unwrap();
        let q = dir.path().join("b.pgm");
        write_image(&q, &img).unwrap();
        assert_eq!(read_image(&q).unwrap(), img);

        let canon = dir.path().join("c.pgm");
        let mut c = b"P5\n3 3\n255\n".to_vec();
        c.extend((0..9).map(|i| (i * 31) as u8));
        fs::write(&canon, &c).unwrap();
        write_image(&q, &read_image(&canon).unwrap()).unwrap();
        assert_eq!(fs::read(&q).unwrap(), c);

        fs::write(&p, [b"P5\n2 2\n255\n".as_slice(), &[255; 4]].concat()).unwrap();
        assert!(read_image(&p).unwrap().data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn ppm_luminance() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("red.ppm");
        fs::write(&p, [b"P6\n1 1\n255\n".as_slice(), &[255, 0, 0]].concat()).unwrap();
        let v = read_image(&p).unwrap().data[0];
        assert!((v - 0.299).abs() <= 1.0 / 255.0);
    }

    #[test]
    fn header_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.pgm");
        fs::write(&p, b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0").unwrap();
        assert!(matches!(read_image(&p), Err(Error::UnsupportedFormat(_))));
        fs::write(&p, b"P5\n2 x\n255\n").unwrap();
        assert!(matches!(read_image(&p), Err(Error::Format(_))));
        fs::write(&p, b"P5\n2 2\n255\n\0").unwrap();
        assert!(matches!(read_image(&p), Err(Error::Format(_))));
        assert!(matches!(
            read_image(&dir.path().join("none.pgm")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn split_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&SceneSpec::default(), 3).unwrap();
        write_split(dir.path(), "test", &samples).unwrap();
        let back = read_split(dir.path(), "test", true).unwrap();
        assert_eq!(back.len(), 3);
        for ((_, b), s) in back.iter().zip(&samples) {
            assert_eq!(b.gt.seg, s.gt.seg);
            assert_eq!(b.gt.sod, s.gt.sod);
            assert!(b.ir.data.iter().zip(&s.ir.data).all(|(a, c)| (a - c).abs() <= 0.5 / 255.0 + 1e-12));
        }
        fs::remove_file(dir.path().join("test/00001_seg.pgm")).unwrap();
        match read_split(dir.path(), "test", true) {
            Err(Error::MissingFile(p)) => assert!(p.ends_with("00001_seg.pgm")),
            other => panic!("{other:?}"),
        }
    }
}
