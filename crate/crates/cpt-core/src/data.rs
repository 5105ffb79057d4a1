//! Synthetic point clouds and on-disk dataset plumbing.
//!
//! Five primitive surfaces (sphere, cube, plane, torus, cylinder) are sampled
//! uniformly by area, optionally jittered with Gaussian noise, and normalized
//! into the unit sphere. The families are chosen so that purely global
//! statistics separate some pairs (plane vs sphere) while others need local
//! neighbourhood structure (torus vs cylinder), which keeps locality
//! ablations informative on desk-scale data.
//!
//! Sampling is antithetic: points are drawn in `(p, -p)` pairs. Every family
//! here is symmetric under negation, so uniformity is preserved, and clouds
//! with an even point count have an exactly zero centroid before noise. That
//! makes the recentering step of normalization a bit-exact no-op on clean
//! clouds, so e.g. a noiseless sphere keeps every point norm at 1.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::unit_sphere_normalize;

// ── Shape families ──────────────────────────────────────────────────────────

pub const TORUS_RING_RADIUS: f64 = 1.0;
pub const TORUS_TUBE_RADIUS: f64 = 0.4;
pub const CYLINDER_RADIUS: f64 = 0.5;
pub const CYLINDER_HEIGHT: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeFamily {
    Sphere,
    Cube,
    Plane,
    Torus,
    Cylinder,
}

impl ShapeFamily {
    pub const ALL: [ShapeFamily; 5] = [
        ShapeFamily::Sphere,
        ShapeFamily::Cube,
        ShapeFamily::Plane,
        ShapeFamily::Torus,
        ShapeFamily::Cylinder,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ShapeFamily::Sphere => "sphere",
            ShapeFamily::Cube => "cube",
            ShapeFamily::Plane => "plane",
            ShapeFamily::Torus => "torus",
            ShapeFamily::Cylinder => "cylinder",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|f| f.name() == name)
            .ok_or_else(|| Error::Data(format!("unknown shape family {name:?}")))
    }

    /// All families split into two parts for segmentation.
    pub fn part_count(&self) -> usize {
        2
    }

    pub fn part_names(&self) -> [&'static str; 2] {
        match self {
            ShapeFamily::Sphere => ["upper", "lower"],
            ShapeFamily::Cube => ["cap", "side"],
            ShapeFamily::Plane => ["left", "right"],
            ShapeFamily::Torus => ["outer", "inner"],
            ShapeFamily::Cylinder => ["cap", "side"],
        }
    }
}

/// Part id of a pre-noise surface point. Rules are thresholds on exact
/// construction coordinates, so they are unambiguous before noise is added.
pub fn part_label(family: ShapeFamily, p: &[f64; 3]) -> usize {
    const EDGE: f64 = 1e-9;
    match family {
        ShapeFamily::Sphere => usize::from(p[2] < 0.0),
        ShapeFamily::Cube => usize::from(p[2].abs() < 1.0 - EDGE),
        ShapeFamily::Plane => usize::from(p[0] >= 0.0),
        ShapeFamily::Torus => {
            usize::from((p[0] * p[0] + p[1] * p[1]).sqrt() < TORUS_RING_RADIUS)
        }
        ShapeFamily::Cylinder => usize::from(p[2].abs() < CYLINDER_HEIGHT / 2.0 - EDGE),
    }
}

fn sample_one(family: ShapeFamily, rng: &mut impl Rng) -> [f64; 3] {
    match family {
        ShapeFamily::Sphere => {
            // Normalized Gaussian direction; re-draw the (measure-zero)
            // degenerate case.
            loop {
                let v: [f64; 3] = [
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                    StandardNormal.sample(rng),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-12 {
                    return [v[0] / n, v[1] / n, v[2] / n];
                }
            }
        }
        ShapeFamily::Cube => {
            // Six faces of equal area on the half-size-1 cube.
            let face = rng.random_range(0..6usize);
            let (axis, sign) = (face / 2, if face % 2 == 0 { 1.0 } else { -1.0 });
            let a = rng.random_range(-1.0..1.0);
            let b = rng.random_range(-1.0..1.0);
            let mut p = [0.0; 3];
            p[axis] = sign;
            p[(axis + 1) % 3] = a;
            p[(axis + 2) % 3] = b;
            p
        }
        ShapeFamily::Plane => [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0],
        ShapeFamily::Torus => {
            // Uniform by area: the tube angle is rejection-weighted by the
            // local ring circumference.
            let (cr, tr) = (TORUS_RING_RADIUS, TORUS_TUBE_RADIUS);
            loop {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                let w: f64 = rng.random_range(0.0..1.0);
                if w < (cr + tr * phi.cos()) / (cr + tr) {
                    let ring = cr + tr * phi.cos();
                    return [ring * theta.cos(), ring * theta.sin(), tr * phi.sin()];
                }
            }
        }
        ShapeFamily::Cylinder => {
            let (r, h) = (CYLINDER_RADIUS, CYLINDER_HEIGHT);
            let side_area = std::f64::consts::TAU * r * h;
            let cap_area = 2.0 * std::f64::consts::PI * r * r;
            if rng.random_range(0.0..side_area + cap_area) < side_area {
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let z = rng.random_range(-h / 2.0..h / 2.0);
                [r * theta.cos(), r * theta.sin(), z]
            } else {
                // Disk point on the top cap; antithetic pairing covers the
                // bottom cap with equal weight.
                let theta = rng.random_range(0.0..std::f64::consts::TAU);
                let rho = r * rng.random_range(0.0..1.0f64).sqrt();
                [rho * theta.cos(), rho * theta.sin(), h / 2.0]
            }
        }
    }
}

/// Uniform surface sample of `n` points, pre-noise and pre-normalization.
/// Points come in `(p, -p)` pairs (plus one unpaired draw when `n` is odd).
pub fn sample_surface(family: ShapeFamily, n: usize, rng: &mut impl Rng) -> Vec<[f64; 3]> {
    let mut pts = Vec::with_capacity(n);
    while pts.len() + 2 <= n {
        let p = sample_one(family, rng);
        pts.push(p);
        pts.push([-p[0], -p[1], -p[2]]);
    }
    if pts.len() < n {
        pts.push(sample_one(family, rng));
    }
    pts
}

// ── Clouds and datasets ─────────────────────────────────────────────────────

/// One point cloud with whichever labels its task uses.
#[derive(Debug, Clone)]
pub struct Cloud<S: Elem> {
    /// `[n, f]`; the first three channels are XYZ.
    pub points: Tensor<S>,
    pub class_id: Option<usize>,
    pub point_labels: Option<Vec<usize>>,
}

/// A batch of clouds with a shared point count: features `[b, n, f]`.
#[derive(Debug, Clone)]
pub struct PointBatch<S: Elem> {
    pub features: Tensor<S>,
    pub class_ids: Option<Vec<usize>>,
    /// Flattened `[b * n]`, aligned with the point axis.
    pub point_labels: Option<Vec<usize>>,
}

impl<S: Elem> PointBatch<S> {
    pub fn batch(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn points_per_cloud(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Stacks clouds into one batch. All clouds must agree on point count,
/// feature width, and which labels they carry.
pub fn collate<S: Elem>(clouds: &[&Cloud<S>]) -> Result<PointBatch<S>> {
    let first = clouds
        .first()
        .ok_or_else(|| Error::Data("cannot collate an empty batch".into()))?;
    let (n, f) = (first.points.shape()[0], first.points.shape()[1]);
    let mut features = Vec::with_capacity(clouds.len() * n * f);
    let mut class_ids = first.class_id.is_some().then(Vec::new);
    let mut point_labels = first.point_labels.is_some().then(Vec::new);
    for c in clouds {
        if c.points.shape() != [n, f] {
            return Err(Error::Data(format!(
                "cannot collate cloud of shape {:?} with [{n}, {f}]",
                c.points.shape()
            )));
        }
        features.extend_from_slice(c.points.data());
        match (&mut class_ids, c.class_id) {
            (Some(ids), Some(id)) => ids.push(id),
            (None, None) => {}
            _ => return Err(Error::Data("mixed labeled and unlabeled clouds in a batch".into())),
        }
        match (&mut point_labels, &c.point_labels) {
            (Some(all), Some(l)) if l.len() == n => all.extend_from_slice(l),
            (Some(_), Some(l)) => {
                return Err(Error::Data(format!(
                    "point labels of length {} for a {n}-point cloud",
                    l.len()
                )))
            }
            (None, None) => {}
            _ => return Err(Error::Data("mixed part-labeled and unlabeled clouds in a batch".into())),
        }
    }
    Ok(PointBatch {
        features: Tensor::new(vec![clouds.len(), n, f], features)?,
        class_ids,
        point_labels,
    })
}

/// Which labels a generated dataset carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    /// Per-cloud class id = index of the shape family.
    Classes,
    /// Per-point two-way part labels from each family's rule.
    Parts,
}

#[derive(Debug, Clone)]
pub struct Dataset<S: Elem> {
    pub clouds: Vec<Cloud<S>>,
    pub class_names: Vec<String>,
    /// Present for part-segmentation datasets.
    pub part_count: Option<usize>,
}

impl<S: Elem> Dataset<S> {
    pub fn class_count(&self) -> usize {
        self.class_names.len()
    }
}

/// Samples one cloud: surface points, optional labels from the pre-noise
/// geometry, Gaussian noise, unit-sphere normalization.
pub fn generate_cloud<S: Elem>(
    family: ShapeFamily,
    n: usize,
    sigma: f64,
    rng: &mut impl Rng,
    labels: LabelKind,
) -> Result<Cloud<S>> {
    if n < 8 {
        return Err(Error::Data(format!("clouds need at least 8 points, got {n}")));
    }
    if sigma < 0.0 {
        return Err(Error::Data(format!("noise sigma must be non-negative, got {sigma}")));
    }
    let surface = sample_surface(family, n, rng);
    let point_labels = match labels {
        LabelKind::Classes => None,
        LabelKind::Parts => Some(surface.iter().map(|p| part_label(family, p)).collect()),
    };
    let mut coords: Vec<f64> = Vec::with_capacity(n * 3);
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("sigma checked non-negative");
        for p in &surface {
            for c in p {
                coords.push(c + noise.sample(rng));
            }
        }
    } else {
        for p in &surface {
            coords.extend_from_slice(p);
        }
    }
    let mut points = Tensor::new(vec![n, 3], coords.iter().map(|&v| S::from_f64(v)).collect())?;
    unit_sphere_normalize(&mut points)?;
    Ok(Cloud {
        points,
        class_id: matches!(labels, LabelKind::Classes).then(|| {
            ShapeFamily::ALL
                .iter()
                .position(|f| *f == family)
                .expect("family is one of ALL")
        }),
        point_labels,
    })
}

/// Generates `per_family` clouds for each family, deterministically under
/// `seed`. Cloud `i` draws from its own derived stream, so changing the
/// cloud count never reshuffles earlier clouds.
pub fn generate_dataset<S: Elem>(
    families: &[ShapeFamily],
    per_family: usize,
    n: usize,
    sigma: f64,
    seed: u64,
    labels: LabelKind,
) -> Result<Dataset<S>> {
    if families.is_empty() || per_family == 0 {
        return Err(Error::Data("dataset needs at least one family and one cloud".into()));
    }
    let mut clouds = Vec::with_capacity(families.len() * per_family);
    for (fi, &family) in families.iter().enumerate() {
        for j in 0..per_family {
            let idx = (fi * per_family + j) as u64;
            let mut rng = crate::rng::stream_indexed(seed, "data", idx);
            let mut cloud = generate_cloud::<S>(family, n, sigma, &mut rng, labels)?;
            if labels == LabelKind::Classes {
                cloud.class_id = Some(fi); // class ids follow the requested family order
            }
            clouds.push(cloud);
        }
    }
    Ok(Dataset {
        clouds,
        class_names: families.iter().map(|f| f.name().to_string()).collect(),
        part_count: matches!(labels, LabelKind::Parts).then(|| {
            families.iter().map(|f| f.part_count()).max().expect("non-empty")
        }),
    })
}

// ── Point files ─────────────────────────────────────────────────────────────

/// Writes one point per line, whitespace-delimited, full round-trip
/// precision.
pub fn save_points<S: Elem>(path: &Path, points: &Tensor<S>) -> Result<()> {
    let (n, f) = (points.shape()[0], points.shape()[1]);
    let mut out = String::new();
    for i in 0..n {
        for j in 0..f {
            if j > 0 {
                out.push(' ');
            }
            write!(out, "{}", points.data()[i * f + j]).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Reads a whitespace-delimited point file with exactly `f` fields per line.
pub fn load_points<S: Elem>(path: &Path, f: usize) -> Result<Tensor<S>> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut data = Vec::new();
    let mut rows = 0;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != f {
            return Err(Error::Parse {
                path: display,
                line: lineno + 1,
                detail: format!("expected {f} fields, found {}", fields.len()),
            });
        }
        for field in fields {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                path: display.clone(),
                line: lineno + 1,
                detail: format!("not a number: {field:?}"),
            })?;
            data.push(S::from_f64(v));
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{display}: no points")));
    }
    Tensor::new(vec![rows, f], data)
}

fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = String::new();
    for l in labels {
        writeln!(out, "{l}").expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn load_labels(path: &Path, expect_n: usize, bound: usize) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut labels = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: usize = line.parse().map_err(|_| Error::Parse {
            path: display.clone(),
            line: lineno + 1,
            detail: format!("not a label id: {line:?}"),
        })?;
        if v >= bound {
            return Err(Error::Parse {
                path: display.clone(),
                line: lineno + 1,
                detail: format!("label {v} out of range for {bound} parts"),
            });
        }
        labels.push(v);
    }
    if labels.len() != expect_n {
        return Err(Error::Data(format!(
            "{display}: {} labels for a {expect_n}-point cloud",
            labels.len()
        )));
    }
    Ok(labels)
}

// ── Manifests ───────────────────────────────────────────────────────────────

/// What the second manifest column holds for one entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EntryLabel {
    Class(usize),
    PartFile(PathBuf),
}

/// Line-oriented dataset index: a header of `#key value` directives followed
/// by one `path<TAB>label` entry per cloud. The label column is a class id
/// for classification sets and a part-label file path for segmentation sets.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub feature_width: usize,
    pub class_names: Vec<String>,
    pub part_count: Option<usize>,
    pub entries: Vec<(PathBuf, EntryLabel)>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "#features {}", self.feature_width).expect("string write");
        writeln!(out, "#classes {}", self.class_names.join(",")).expect("string write");
        if let Some(p) = self.part_count {
            writeln!(out, "#parts {p}").expect("string write");
        }
        for (file, label) in &self.entries {
            match label {
                EntryLabel::Class(id) => writeln!(out, "{}\t{id}", file.display()),
                EntryLabel::PartFile(lp) => writeln!(out, "{}\t{}", file.display(), lp.display()),
            }
            .expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let display = path.display().to_string();
        let mut feature_width = None;
        let mut class_names: Vec<String> = Vec::new();
        let mut part_count = None;
        let mut entries = Vec::new();
        let parse_err = |lineno: usize, detail: String| Error::Parse {
            path: display.clone(),
            line: lineno + 1,
            detail,
        };
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(directive) = line.strip_prefix('#') {
                let (key, value) = directive
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| parse_err(lineno, format!("bare directive {line:?}")))?;
                match key {
                    "features" => {
                        feature_width = Some(value.trim().parse().map_err(|_| {
                            parse_err(lineno, format!("bad feature width {value:?}"))
                        })?)
                    }
                    "classes" => {
                        class_names = value.trim().split(',').map(|s| s.trim().to_string()).collect()
                    }
                    "parts" => {
                        part_count = Some(value.trim().parse().map_err(|_| {
                            parse_err(lineno, format!("bad part count {value:?}"))
                        })?)
                    }
                    other => return Err(parse_err(lineno, format!("unknown directive #{other}"))),
                }
                continue;
            }
            let (file, label) = line
                .split_once('\t')
                .ok_or_else(|| parse_err(lineno, "expected path<TAB>label".into()))?;
            let label = label.trim();
            let entry = if label.bytes().all(|b| b.is_ascii_digit()) && !label.is_empty() {
                EntryLabel::Class(label.parse().expect("checked all digits"))
            } else {
                EntryLabel::PartFile(PathBuf::from(label))
            };
            entries.push((PathBuf::from(file), entry));
        }
        let feature_width =
            feature_width.ok_or_else(|| Error::Data(format!("{display}: missing #features directive")))?;
        if class_names.is_empty() {
            return Err(Error::Data(format!("{display}: missing #classes directive")));
        }
        for (file, label) in &entries {
            if let EntryLabel::Class(id) = label {
                if *id >= class_names.len() {
                    return Err(Error::Data(format!(
                        "{display}: {} has class {id}, but only {} classes are declared",
                        file.display(),
                        class_names.len()
                    )));
                }
            }
        }
        Ok(Manifest { feature_width, class_names, part_count, entries })
    }

    /// Loads every referenced cloud. Relative entry paths resolve against
    /// the manifest's own directory.
    pub fn load_dataset<S: Elem>(&self, manifest_path: &Path) -> Result<Dataset<S>> {
        let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
        let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
        let mut clouds = Vec::with_capacity(self.entries.len());
        for (file, label) in &self.entries {
            let points = load_points::<S>(&resolve(file), self.feature_width)?;
            let n = points.shape()[0];
            let (class_id, point_labels) = match label {
                EntryLabel::Class(id) => (Some(*id), None),
                EntryLabel::PartFile(lp) => {
                    let bound = self.part_count.ok_or_else(|| {
                        Error::Data("manifest has part-label entries but no #parts directive".into())
                    })?;
                    (None, Some(load_labels(&resolve(lp), n, bound)?))
                }
            };
            clouds.push(Cloud { points, class_id, point_labels });
        }
        Ok(Dataset {
            clouds,
            class_names: self.class_names.clone(),
            part_count: self.part_count,
        })
    }
}

/// Writes a dataset to `dir` as point files (plus label files for
/// segmentation) and returns the manifest, which is also written to
/// `dir/manifest.txt`.
pub fn save_dataset<S: Elem>(dir: &Path, dataset: &Dataset<S>) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let width = dataset
        .clouds
        .first()
        .map(|c| c.points.shape()[1])
        .ok_or_else(|| Error::Data("cannot save an empty dataset".into()))?;
    let mut entries = Vec::with_capacity(dataset.clouds.len());
    for (i, cloud) in dataset.clouds.iter().enumerate() {
        let name = match cloud.class_id {
            Some(id) => format!("{}_{i:04}.pts", dataset.class_names[id]),
            None => format!("cloud_{i:04}.pts"),
        };
        save_points(&dir.join(&name), &cloud.points)?;
        let label = match (&cloud.class_id, &cloud.point_labels) {
            (Some(id), None) => EntryLabel::Class(*id),
            (None, Some(labels)) => {
                let lname = format!("{}.labels", name.trim_end_matches(".pts"));
                save_labels(&dir.join(&lname), labels)?;
                EntryLabel::PartFile(PathBuf::from(lname))
            }
            _ => return Err(Error::Data(format!("cloud {i} must carry exactly one label kind"))),
        };
        entries.push((PathBuf::from(name), label));
    }
    let manifest = Manifest {
        feature_width: width,
        class_names: dataset.class_names.clone(),
        part_count: dataset.part_count,
        entries,
    };
    let mpath = dir.join("manifest.txt");
    manifest.save(&mpath)?;
    Ok(mpath)
}

// ── Splits ──────────────────────────────────────────────────────────────────

/// Stratified train/test split over item indices. `class_of[i]` is the class
/// of item `i` (`None` lumps items into one stratum, used for segmentation
/// sets). Per-class train counts follow largest-remainder rounding of the
/// global target, so a 2/3 split of 30 items is exactly 20/10.
pub fn make_splits(
    class_of: &[Option<usize>],
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&train_fraction) || train_fraction == 0.0 {
        return Err(Error::Data(format!(
            "train fraction must be in (0, 1), got {train_fraction}"
        )));
    }
    if class_of.is_empty() {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    let mut groups: BTreeMap<Option<usize>, Vec<usize>> = BTreeMap::new();
    for (i, c) in class_of.iter().enumerate() {
        groups.entry(*c).or_default().push(i);
    }
    for (class, members) in &groups {
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "class {class:?} has {} item(s); stratified splitting needs at least 2",
                members.len()
            )));
        }
    }
    let total = class_of.len();
    let target: usize = ((total as f64) * train_fraction).round() as usize;
    // Largest-remainder apportionment of the train quota across classes.
    let mut quotas: Vec<(Option<usize>, usize, f64)> = groups
        .iter()
        .map(|(&c, members)| {
            let exact = members.len() as f64 * train_fraction;
            (c, exact.floor() as usize, exact - exact.floor())
        })
        .collect();
    let mut assigned: usize = quotas.iter().map(|&(_, base, _)| base).sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        quotas[b].2.partial_cmp(&quotas[a].2).expect("finite remainders").then(a.cmp(&b))
    });
    for &qi in order.iter().cycle().take(quotas.len() * 2) {
        if assigned == target {
            break;
        }
        let cap = groups[&quotas[qi].0].len();
        if assigned < target && quotas[qi].1 < cap {
            quotas[qi].1 += 1;
            assigned += 1;
        } else if assigned > target && quotas[qi].1 > 0 {
            quotas[qi].1 -= 1;
            assigned -= 1;
        }
    }
    let mut rng = crate::rng::stream(seed, "split");
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (class, members) in &groups {
        let quota = quotas.iter().find(|&&(c, _, _)| c == *class).expect("class present").1;
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        train.extend_from_slice(&shuffled[..quota]);
        test.extend_from_slice(&shuffled[quota..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((train, test))
}

// ── Tests ───────────────────────────────────────────────────────────────────
