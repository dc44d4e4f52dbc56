//! Synthetic few-shot segmentation benchmark.
//!
//! Procedural multi-class scenes (textured geometric objects over a noisy
//! background, later objects occluding earlier ones), disjoint train/test
//! class folds, a seeded episode sampler with degenerate-mask rejection, and
//! the mIoU / FB-IoU evaluation metrics. Everything is regenerable from
//! (seed, config) alone; no data is stored.

use std::f64::consts::PI;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::pnm;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EpisodeError {
    #[error("split has no classes")]
    EmptySplit,
    #[error("class {class}: no valid scene after {attempts} attempts (seed {seed})")]
    DegenerateEpisode {
        class: usize,
        attempts: usize,
        seed: u64,
    },
    #[error("support shapes disagree across shots")]
    InconsistentShots,
}

/// Deterministic seed derivation: fold extra words into a base seed.
pub fn mix_seed(base: u64, parts: &[u64]) -> u64 {
    fn splitmix64(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let mut s = splitmix64(base ^ 0xD6E8_FEB8_6659_FD93);
    for &p in parts {
        s = splitmix64(s ^ splitmix64(p));
    }
    s
}

// ---------------------------------------------------------------------------
// Classes and scenes
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disk,
    Square,
    Triangle,
    Ring,
    Cross,
    Bar,
}

const FAMILIES: [ShapeFamily; 6] = [
    ShapeFamily::Disk,
    ShapeFamily::Square,
    ShapeFamily::Triangle,
    ShapeFamily::Ring,
    ShapeFamily::Cross,
    ShapeFamily::Bar,
];

/// One benchmark class: a shape family with a fixed color and stripe texture.
#[derive(Clone, Debug)]
pub struct ShapeClass {
    pub id: usize,
    pub family: ShapeFamily,
    pub color: [f64; 3],
    pub stripe_dir: (f64, f64),
    pub stripe_period: f64,
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = (h % 360.0) / 60.0;
    let x = c * (1.0 - ((hp % 2.0) - 1.0).abs());
    let (r, g, b) = match hp as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Fixed registry: evenly spaced hues, shape families cycling, textures
/// derived from the class id. Independent of any run seed so datasets are a
/// pure function of (seed, config).
#[derive(Clone, Debug)]
pub struct ClassRegistry {
    pub classes: Vec<ShapeClass>,
}

impl ClassRegistry {
    pub fn standard(num_classes: usize) -> Self {
        let classes = (0..num_classes)
            .map(|id| {
                let hue = 360.0 * id as f64 / num_classes as f64;
                let tex = mix_seed(0xC1A5_5E5u64, &[id as u64]);
                let angle = 2.0 * PI * ((tex % 997) as f64) / 997.0;
                ShapeClass {
                    id,
                    family: FAMILIES[id % FAMILIES.len()],
                    color: hsv_to_rgb(hue, 0.8, 0.9),
                    stripe_dir: (angle.cos(), angle.sin()),
                    stripe_period: 4.0 + ((tex >> 16) % 5) as f64,
                }
            })
            .collect();
        Self { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

/// Point-in-shape test in object-local coordinates.
fn member(family: ShapeFamily, dx: f64, dy: f64, r: f64) -> bool {
    match family {
        ShapeFamily::Disk => dx * dx + dy * dy <= r * r,
        ShapeFamily::Square => dx.abs().max(dy.abs()) <= 0.85 * r,
        ShapeFamily::Triangle => {
            // apex up, base down
            let top = -r;
            let base = 0.8 * r;
            let half = 0.95 * r;
            if dy < top || dy > base {
                return false;
            }
            let frac = (dy - top) / (base - top);
            dx.abs() <= half * frac
        }
        ShapeFamily::Ring => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.45 * r) * (0.45 * r)
        }
        ShapeFamily::Cross => {
            let arm = 0.4 * r;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        ShapeFamily::Bar => dx.abs() <= r && dy.abs() <= 0.38 * r,
    }
}

#[derive(Clone, Debug)]
pub struct PlacedObject {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub radius: f64,
    pub phase: f64,
    pub brightness: f64,
}

impl PlacedObject {
    pub fn contains(&self, family: ShapeFamily, x: f64, y: f64) -> bool {
        member(family, x - self.cx, y - self.cy, self.radius)
    }
}

#[derive(Clone, Debug)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub noise: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_radius: 10.0,
            max_radius: 20.0,
            noise: 0.02,
        }
    }
}

pub struct Scene<S: Scalar> {
    pub image: Tensor<S>,
    /// Mutually exclusive occlusion-resolved masks, one per present class,
    /// in draw order.
    pub masks: Vec<(usize, Tensor<S>)>,
    pub objects: Vec<PlacedObject>,
}

/// Render one scene. Objects are placed in the order of `present`; later
/// objects occlude earlier ones and the per-class masks mark only visible
/// pixels.
pub fn generate_scene<S: Scalar>(
    registry: &ClassRegistry,
    present: &[usize],
    seed: u64,
    cfg: &SceneConfig,
) -> Scene<S> {
    let (h, w) = (cfg.height, cfg.width);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0x5CE11E]));
    let objects: Vec<PlacedObject> = present
        .iter()
        .map(|&class| {
            let radius = rng.gen_range(cfg.min_radius..=cfg.max_radius);
            PlacedObject {
                class,
                cx: rng.gen_range(0.25 * w as f64..0.75 * w as f64),
                cy: rng.gen_range(0.25 * h as f64..0.75 * h as f64),
                radius,
                phase: rng.gen_range(0.0..2.0 * PI),
                brightness: rng.gen_range(0.9..1.1),
            }
        })
        .collect();

    // ownership by draw order: last covering object wins
    let mut owner = vec![usize::MAX; h * w];
    for (idx, obj) in objects.iter().enumerate() {
        let fam = registry.classes[obj.class].family;
        let y0 = ((obj.cy - obj.radius).floor().max(0.0)) as usize;
        let y1 = ((obj.cy + obj.radius).ceil() as usize).min(h.saturating_sub(1));
        let x0 = ((obj.cx - obj.radius).floor().max(0.0)) as usize;
        let x1 = ((obj.cx + obj.radius).ceil() as usize).min(w.saturating_sub(1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                if obj.contains(fam, x as f64 + 0.5, y as f64 + 0.5) {
                    owner[y * w + x] = idx;
                }
            }
        }
    }

    let mut image = vec![0.0f64; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let rgb = if owner[p] == usize::MAX {
                // background: soft gradient plus noise
                let g = 0.42 + 0.08 * (y as f64 / h as f64);
                [g, g, g]
            } else {
                let obj = &objects[owner[p]];
                let class = &registry.classes[obj.class];
                let stripe_arg = 2.0 * PI
                    * (class.stripe_dir.0 * x as f64 + class.stripe_dir.1 * y as f64)
                    / class.stripe_period
                    + obj.phase;
                let shade = obj.brightness * (0.82 + 0.18 * stripe_arg.sin());
                [
                    class.color[0] * shade,
                    class.color[1] * shade,
                    class.color[2] * shade,
                ]
            };
            for ch in 0..3 {
                let noise = rng.gen_range(-cfg.noise..=cfg.noise);
                image[ch * h * w + p] = (rgb[ch] + noise).clamp(0.0, 1.0);
            }
        }
    }

    let masks = objects
        .iter()
        .enumerate()
        .map(|(idx, obj)| {
            let data: Vec<S> = owner
                .iter()
                .map(|&o| if o == idx { S::one() } else { S::zero() })
                .collect();
            (obj.class, Tensor::from_vec(vec![h, w], data).unwrap())
        })
        .collect();

    Scene {
        image: Tensor::from_vec(
            vec![3, h, w],
            image.into_iter().map(S::from_f64).collect(),
        )
        .unwrap(),
        masks,
        objects,
    }
}

// ---------------------------------------------------------------------------
// Folds and episodes
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Divide `0..num_classes` evenly into `num_folds` disjoint test folds.
pub fn fold_splits(num_classes: usize, num_folds: usize) -> Vec<FoldSplit> {
    assert!(num_folds > 0 && num_classes % num_folds == 0);
    let per = num_classes / num_folds;
    (0..num_folds)
        .map(|f| {
            let test: Vec<usize> = (f * per..(f + 1) * per).collect();
            let train: Vec<usize> = (0..num_classes).filter(|c| !test.contains(c)).collect();
            debug_assert!(train.iter().all(|c| !test.contains(c)));
            FoldSplit { train, test }
        })
        .collect()
}

/// One few-shot task: a query pair plus K support pairs of the same class.
#[derive(Clone, Debug)]
pub struct Episode<S: Scalar> {
    pub class_id: usize,
    pub seed: u64,
    pub query_image: Tensor<S>,
    pub query_mask: Tensor<S>,
    pub supports: Vec<(Tensor<S>, Tensor<S>)>,
}

#[derive(Clone, Debug)]
pub struct EpisodeConfig {
    pub k: usize,
    pub scene: SceneConfig,
    pub max_distractors: usize,
    /// Masks must stay nonempty when nearest-neighbor-resized to each of
    /// these resolutions (the stage grids that consume them downstream).
    pub mask_check_resolutions: Vec<(usize, usize)>,
    pub max_attempts: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            k: 1,
            scene: SceneConfig::default(),
            max_distractors: 3,
            mask_check_resolutions: Vec::new(),
            max_attempts: 64,
        }
    }
}

fn mask_is_usable<S: Scalar>(mask: &Tensor<S>, checks: &[(usize, usize)]) -> bool {
    if !mask.data().iter().any(|&v| v > S::zero()) {
        return false;
    }
    checks.iter().all(|&(h, w)| {
        crate::tensor::nn_resize_mask(mask, h, w)
            .map(|m| m.data().iter().any(|&v| v > S::zero()))
            .unwrap_or(false)
    })
}

fn sample_scene_pair<S: Scalar>(
    registry: &ClassRegistry,
    split: &[usize],
    class: usize,
    cfg: &EpisodeConfig,
    rng: &mut ChaCha8Rng,
    seed: u64,
) -> Result<(Tensor<S>, Tensor<S>), EpisodeError> {
    for _ in 0..cfg.max_attempts {
        let cap = cfg.max_distractors.min(split.len().saturating_sub(1));
        let n_distract = if cap == 0 { 0 } else { rng.gen_range(0..=cap) };
        let mut pool: Vec<usize> = split.iter().copied().filter(|&c| c != class).collect();
        let mut present = vec![class];
        for _ in 0..n_distract {
            let pick = rng.gen_range(0..pool.len());
            present.push(pool.swap_remove(pick));
        }
        // shuffle draw order so the episode class can be occluded too
        for i in (1..present.len()).rev() {
            present.swap(i, rng.gen_range(0..=i));
        }
        let scene: Scene<S> = generate_scene(registry, &present, rng.gen(), &cfg.scene);
        let mask = scene
            .masks
            .iter()
            .find(|(c, _)| *c == class)
            .map(|(_, m)| m.clone())
            .expect("episode class is always present");
        if mask_is_usable(&mask, &cfg.mask_check_resolutions) {
            return Ok((scene.image, mask));
        }
    }
    Err(EpisodeError::DegenerateEpisode {
        class,
        attempts: cfg.max_attempts,
        seed,
    })
}

/// Sample one episode: class uniform over the split, query and support
/// scenes independent, degenerate masks rejection-resampled.
pub fn sample_episode<S: Scalar>(
    registry: &ClassRegistry,
    split: &[usize],
    cfg: &EpisodeConfig,
    seed: u64,
) -> Result<Episode<S>, EpisodeError> {
    if split.is_empty() {
        return Err(EpisodeError::EmptySplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, &[0xE915_0DE]));
    let class = split[rng.gen_range(0..split.len())];
    let (query_image, query_mask) = sample_scene_pair(registry, split, class, cfg, &mut rng, seed)?;
    let mut supports = Vec::with_capacity(cfg.k);
    for _ in 0..cfg.k {
        supports.push(sample_scene_pair(registry, split, class, cfg, &mut rng, seed)?);
    }
    Ok(Episode {
        class_id: class,
        seed,
        query_image,
        query_mask,
        supports,
    })
}

/// Write an episode as portable images plus a manifest; returns the paths.
pub fn dump_episode<S: Scalar>(ep: &Episode<S>, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = (ep.query_mask.shape()[0], ep.query_mask.shape()[1]);
    let mut paths = Vec::new();
    let mut put = |name: String, write: &dyn Fn(&Path) -> std::io::Result<()>| {
        let p = dir.join(&name);
        write(&p)?;
        paths.push(p);
        std::io::Result::Ok(())
    };
    put("query.ppm".into(), &|p| {
        pnm::write_ppm(p, w, h, &pnm::rgb_from_image(&ep.query_image))
    })?;
    put("query_mask.pgm".into(), &|p| {
        pnm::write_pgm(p, w, h, &pnm::gray_from_mask(&ep.query_mask))
    })?;
    for (i, (img, mask)) in ep.supports.iter().enumerate() {
        put(format!("support_{i}.ppm"), &|p| {
            pnm::write_ppm(p, w, h, &pnm::rgb_from_image(img))
        })?;
        put(format!("support_mask_{i}.pgm"), &|p| {
            pnm::write_pgm(p, w, h, &pnm::gray_from_mask(mask))
        })?;
    }
    let manifest = dir.join("manifest.txt");
    let mut f = std::fs::File::create(&manifest)?;
    writeln!(f, "episode_seed={}", ep.seed)?;
    writeln!(f, "class={}", ep.class_id)?;
    writeln!(f, "k={}", ep.supports.len())?;
    for p in &paths {
        writeln!(f, "file={}", p.file_name().unwrap().to_string_lossy())?;
    }
    paths.push(manifest);
    Ok(paths)
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Per-episode pixel counts; accumulation is associative so evaluation can
/// merge them in any order.
#[derive(Clone, Copy, Debug, Default)]
pub struct SegCounts {
    pub inter_fg: u64,
    pub union_fg: u64,
    pub inter_bg: u64,
    pub union_bg: u64,
}

#[derive(Clone, Debug)]
pub struct EvalRecord {
    pub class_id: usize,
    pub counts: SegCounts,
}

/// Count foreground/background agreement between a prediction and ground
/// truth (both {0,1} maps).
pub fn mask_counts<S: Scalar>(pred: &Tensor<S>, gt: &Tensor<S>) -> SegCounts {
    assert_eq!(pred.shape(), gt.shape());
    let half = S::from_f64(0.5);
    let mut c = SegCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let (p, g) = (p > half, g > half);
        c.inter_fg += (p && g) as u64;
        c.union_fg += (p || g) as u64;
        c.inter_bg += (!p && !g) as u64;
        c.union_bg += (!p || !g) as u64;
    }
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MiouMode {
    /// Pool intersection/union counts per class across episodes, then divide.
    Pooled,
    /// Average per-episode IoU within each class.
    PerEpisode,
}

#[derive(Clone, Debug)]
pub struct MiouReport {
    pub miou: f64,
    pub per_class: Vec<(usize, f64)>,
    /// Classes excluded for zero union across the run.
    pub excluded: Vec<usize>,
}

pub fn miou(records: &[EvalRecord], mode: MiouMode) -> MiouReport {
    let mut classes: Vec<usize> = records.iter().map(|r| r.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut per_class = Vec::new();
    let mut excluded = Vec::new();
    for &c in &classes {
        let of_class = records.iter().filter(|r| r.class_id == c);
        let iou = match mode {
            MiouMode::Pooled => {
                let (mut i, mut u) = (0u64, 0u64);
                for r in of_class {
                    i += r.counts.inter_fg;
                    u += r.counts.union_fg;
                }
                if u == 0 {
                    excluded.push(c);
                    continue;
                }
                i as f64 / u as f64
            }
            MiouMode::PerEpisode => {
                let mut total = 0.0;
                let mut n = 0usize;
                for r in of_class {
                    if r.counts.union_fg == 0 {
                        continue;
                    }
                    total += r.counts.inter_fg as f64 / r.counts.union_fg as f64;
                    n += 1;
                }
                if n == 0 {
                    excluded.push(c);
                    continue;
                }
                total / n as f64
            }
        };
        per_class.push((c, iou));
    }
    let miou = if per_class.is_empty() {
        0.0
    } else {
        per_class.iter().map(|(_, v)| v).sum::<f64>() / per_class.len() as f64
    };
    MiouReport {
        miou,
        per_class,
        excluded,
    }
}

/// Mean of pooled foreground and background IoU, ignoring classes.
pub fn fb_iou(records: &[EvalRecord]) -> f64 {
    let mut t = SegCounts::default();
    for r in records {
        t.inter_fg += r.counts.inter_fg;
        t.union_fg += r.counts.union_fg;
        t.inter_bg += r.counts.inter_bg;
        t.union_bg += r.counts.union_bg;
    }
    let f = if t.union_fg == 0 {
        1.0
    } else {
        t.inter_fg as f64 / t.union_fg as f64
    };
    let b = if t.union_bg == 0 {
        1.0
    } else {
        t.inter_bg as f64 / t.union_bg as f64
    };
    0.5 * (f + b)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(h: usize, w: usize, on: &[usize]) -> Tensor<f64> {
        let mut d = vec![0.0; h * w];
        for &i in on {
            d[i] = 1.0;
        }
        Tensor::from_vec(vec![h, w], d).unwrap()
    }

    #[test]
    fn scene_determinism() {
        let reg = ClassRegistry::standard(12);
        let cfg = SceneConfig::default();
        let a: Scene<f64> = generate_scene(&reg, &[1, 4], 99, &cfg);
        let b: Scene<f64> = generate_scene(&reg, &[1, 4], 99, &cfg);
        assert_eq!(a.image, b.image);
        assert_eq!(a.masks[0].1, b.masks[0].1);
    }

    #[test]
    fn masks_are_disjoint_and_match_point_oracle() {
        let reg = ClassRegistry::standard(12);
        let cfg = SceneConfig::default();
        let scene: Scene<f64> = generate_scene(&reg, &[2, 7], 1234, &cfg);
        let (h, w) = (cfg.height, cfg.width);
        for y in 0..h {
            for x in 0..w {
                // independent per-pixel oracle: last covering object owns
                let mut want: Option<usize> = None;
                for (idx, obj) in scene.objects.iter().enumerate() {
                    if obj.contains(reg.classes[obj.class].family, x as f64 + 0.5, y as f64 + 0.5)
                    {
                        want = Some(idx);
                    }
                }
                let got: Vec<bool> = scene
                    .masks
                    .iter()
                    .map(|(_, m)| m.at2(y, x) > 0.0)
                    .collect();
                assert!(got.iter().filter(|&&b| b).count() <= 1, "masks overlap");
                match want {
                    Some(idx) => assert!(got[idx], "pixel ({y},{x}) should belong to {idx}"),
                    None => assert!(got.iter().all(|&b| !b)),
                }
            }
        }
    }

    #[test]
    fn distinct_classes_render_differently() {
        let reg = ClassRegistry::standard(12);
        let cfg = SceneConfig::default();
        let a: Scene<f64> = generate_scene(&reg, &[0], 5, &cfg);
        let b: Scene<f64> = generate_scene(&reg, &[1], 5, &cfg);
        assert_ne!(a.image, b.image);
    }

    #[test]
    fn fold_splits_are_disjoint() {
        for split in fold_splits(12, 4) {
            assert_eq!(split.test.len(), 3);
            assert!(split.train.iter().all(|c| !split.test.contains(c)));
        }
    }

    #[test]
    fn episode_sampler_is_deterministic_and_k_sized() {
        let reg = ClassRegistry::standard(12);
        let split: Vec<usize> = (0..9).collect();
        let cfg = EpisodeConfig {
            k: 5,
            ..EpisodeConfig::default()
        };
        let a: Episode<f64> = sample_episode(&reg, &split, &cfg, 31).unwrap();
        let b: Episode<f64> = sample_episode(&reg, &split, &cfg, 31).unwrap();
        assert_eq!(a.supports.len(), 5);
        assert_eq!(a.class_id, b.class_id);
        assert_eq!(a.query_image, b.query_image);
        for ((ai, am), (bi, bm)) in a.supports.iter().zip(&b.supports) {
            assert_eq!(ai, bi);
            assert_eq!(am, bm);
        }
        assert!(a.query_mask.data().iter().any(|&v| v > 0.0));
        for (_, m) in &a.supports {
            assert!(m.data().iter().any(|&v| v > 0.0));
        }
    }

    #[test]
    fn class_frequencies_are_roughly_uniform() {
        let reg = ClassRegistry::standard(12);
        let split: Vec<usize> = (0..12).collect();
        let cfg = EpisodeConfig::default();
        let mut counts = vec![0usize; 12];
        let n = 1000;
        for s in 0..n {
            let ep: Episode<f64> = sample_episode(&reg, &split, &cfg, s).unwrap();
            counts[ep.class_id] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!(
                (freq - 1.0 / 12.0).abs() < 0.05,
                "class frequency {freq} too far from uniform"
            );
        }
    }

    #[test]
    fn miou_trivial_cases() {
        let gt = mask(2, 2, &[0, 1]);
        let perfect = vec![EvalRecord {
            class_id: 0,
            counts: mask_counts(&gt, &gt),
        }];
        assert_eq!(miou(&perfect, MiouMode::Pooled).miou, 1.0);
        let none = vec![EvalRecord {
            class_id: 0,
            counts: mask_counts(&mask(2, 2, &[]), &gt),
        }];
        assert_eq!(miou(&none, MiouMode::Pooled).miou, 0.0);
    }

    #[test]
    fn miou_pools_counts_before_dividing() {
        // episode 1: inter 3, union 4; episode 2: inter 1, union 2
        let recs = vec![
            EvalRecord {
                class_id: 0,
                counts: mask_counts(&mask(2, 4, &[0, 1, 2]), &mask(2, 4, &[0, 1, 2, 3])),
            },
            EvalRecord {
                class_id: 0,
                counts: mask_counts(&mask(2, 4, &[0]), &mask(2, 4, &[0, 1])),
            },
        ];
        let pooled = miou(&recs, MiouMode::Pooled).miou;
        let averaged = miou(&recs, MiouMode::PerEpisode).miou;
        assert!((pooled - 4.0 / 6.0).abs() < 1e-12);
        assert!((averaged - 0.625).abs() < 1e-12);
        // the equal-union hand case where both conventions agree
        let equal = vec![
            EvalRecord {
                class_id: 0,
                counts: mask_counts(&mask(2, 4, &[0, 1, 2]), &mask(2, 4, &[0, 1, 2, 3])),
            },
            EvalRecord {
                class_id: 0,
                counts: mask_counts(&mask(2, 4, &[0, 1]), &mask(2, 4, &[0, 1, 2, 3])),
            },
        ];
        assert!((miou(&equal, MiouMode::Pooled).miou - 0.625).abs() < 1e-12);
    }

    #[test]
    fn fb_iou_hand_count() {
        let gt = mask(2, 2, &[0, 1]);
        let pred = mask(2, 2, &[0, 2]);
        let recs = vec![EvalRecord {
            class_id: 0,
            counts: mask_counts(&pred, &gt),
        }];
        assert!((fb_iou(&recs) - 1.0 / 3.0).abs() < 1e-12);
        let perfect = vec![EvalRecord {
            class_id: 0,
            counts: mask_counts(&gt, &gt),
        }];
        assert_eq!(fb_iou(&perfect), 1.0);
        // all-foreground prediction against all-foreground ground truth
        let all = mask(2, 2, &[0, 1, 2, 3]);
        let recs2 = vec![EvalRecord {
            class_id: 0,
            counts: mask_counts(&all, &all),
        }];
        assert_eq!(fb_iou(&recs2), 1.0);
    }

    #[test]
    fn episode_dump_writes_images_and_manifest() {
        let reg = ClassRegistry::standard(12);
        let split: Vec<usize> = (0..9).collect();
        let cfg = EpisodeConfig {
            k: 2,
            ..EpisodeConfig::default()
        };
        let ep: Episode<f64> = sample_episode(&reg, &split, &cfg, 4).unwrap();
        let dir = std::env::temp_dir().join(format!("fewseg-dump-{}", std::process::id()));
        let paths = dump_episode(&ep, &dir).unwrap();
        // query pair, two support pairs, manifest
        assert_eq!(paths.len(), 2 + 2 * 2 + 1);
        let (magic, w, h, _) = crate::pnm::read_pnm(&dir.join("query.ppm")).unwrap();
        assert_eq!((magic.as_str(), w, h), ("P6", 64, 64));
        let (magic, ..) = crate::pnm::read_pnm(&dir.join("support_mask_1.pgm")).unwrap();
        assert_eq!(magic, "P5");
        let manifest = std::fs::read_to_string(dir.join("manifest.txt")).unwrap();
        assert!(manifest.contains("episode_seed=4"));
        assert!(manifest.contains(&format!("class={}", ep.class_id)));
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let gt = mask(2, 2, &[0, 1]);
        let p1 = mask(2, 2, &[0]);
        let p2 = mask(2, 2, &[0, 1, 2]);
        let a = vec![
            EvalRecord {
                class_id: 0,
                counts: mask_counts(&p1, &gt),
            },
            EvalRecord {
                class_id: 1,
                counts: mask_counts(&p2, &gt),
            },
        ];
        let b: Vec<EvalRecord> = a.iter().rev().cloned().collect();
        assert_eq!(miou(&a, MiouMode::Pooled).miou, miou(&b, MiouMode::Pooled).miou);
        assert_eq!(fb_iou(&a), fb_iou(&b));
    }
}
