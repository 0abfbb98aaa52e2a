//! GZSL datasets: text file formats and a seeded synthetic generator.
//!
//! Three UTF-8 files describe a dataset:
//!
//! * features: header `W H C N`, then for every sample a line
//!   `class_id domain_flag` (`0` seen, `1` unseen) followed by a line of
//!   `W·H·C` reals in `W, H, C` row-major order.
//! * attributes: header `n_classes A`, then one line per class:
//!   `class_id` followed by `A` reals.
//! * splits: `seen: id …`, `unseen: id …`, `val_fraction: r` and an optional
//!   `test_fraction: r` (default 0.2).
//!
//! Seen-domain samples of each class are partitioned in file order: the last
//! `round(n·test_fraction)` go to test, the `round(n·val_fraction)` before
//! them to validation, the rest to training. [`write_dataset`] emits classes in
//! ascending id order with each class's train, val and test samples in that
//! order, so canonical files survive a load/write round trip byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub type ClassId = u32;

pub const FEATURES_FILE: &str = "features.txt";
pub const ATTRIBUTES_FILE: &str = "attributes.txt";
pub const SPLITS_FILE: &str = "splits.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Domain {
    Seen,
    Unseen,
}

impl Domain {
    fn flag(self) -> u8 {
        match self {
            Domain::Seen => 0,
            Domain::Unseen => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticLabel {
    pub class_id: ClassId,
    pub attributes: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `W×H×C` feature map.
    pub feature: Tensor,
    pub label: ClassId,
    pub domain: Domain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GzslDataset {
    pub feat_dims: (usize, usize, usize),
    pub train_seen: Vec<Sample>,
    pub val_seen: Vec<Sample>,
    pub test_seen: Vec<Sample>,
    pub test_unseen: Vec<Sample>,
    /// Sorted by class id.
    pub semantics: Vec<SemanticLabel>,
    pub seen_classes: BTreeSet<ClassId>,
    pub unseen_classes: BTreeSet<ClassId>,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl GzslDataset {
    pub fn attr_dim(&self) -> usize {
        self.semantics[0].attributes.len()
    }

    pub fn channels(&self) -> usize {
        self.feat_dims.2
    }

    pub fn positions(&self) -> usize {
        self.feat_dims.0 * self.feat_dims.1
    }

    /// All class ids in semantic-row order.
    pub fn class_ids(&self) -> Vec<ClassId> {
        self.semantics.iter().map(|s| s.class_id).collect()
    }

    pub fn seen_ids(&self) -> Vec<ClassId> {
        self.seen_classes.iter().copied().collect()
    }

    pub fn unseen_ids(&self) -> Vec<ClassId> {
        self.unseen_classes.iter().copied().collect()
    }

    /// `K×A` attribute matrix, one row per class in id order.
    pub fn attribute_matrix(&self) -> Tensor {
        let rows: Vec<Vec<f64>> =
            self.semantics.iter().map(|s| s.attributes.data().to_vec()).collect();
        Tensor::from_rows(&rows).expect("validated attribute lengths")
    }

    /// Row of `class` in [`Self::attribute_matrix`].
    pub fn semantic_row(&self, class: ClassId) -> Option<usize> {
        self.semantics.binary_search_by_key(&class, |s| s.class_id).ok()
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.seen_classes.intersection(&self.unseen_classes).next() {
            return Err(Error::invalid(format!("class {c} is both seen and unseen")));
        }
        let a = self
            .semantics
            .first()
            .ok_or_else(|| Error::invalid("dataset has no semantic labels"))?
            .attributes
            .len();
        let mut ids = BTreeSet::new();
        for s in &self.semantics {
            if s.attributes.len() != a {
                return Err(Error::invalid(format!(
                    "class {} has {} attributes, expected {a}",
                    s.class_id,
                    s.attributes.len()
                )));
            }
            if s.attributes.data().iter().all(|&v| v == 0.0) {
                return Err(Error::invalid(format!("class {} has an all-zero attribute vector", s.class_id)));
            }
            if !ids.insert(s.class_id) {
                return Err(Error::invalid(format!("class {} has two attribute rows", s.class_id)));
            }
        }
        for c in self.seen_classes.iter().chain(&self.unseen_classes) {
            if !ids.contains(c) {
                return Err(Error::invalid(format!("class {c} has no attribute row")));
            }
        }
        let (w, h, c) = self.feat_dims;
        let check = |samples: &[Sample], classes: &BTreeSet<ClassId>, domain: Domain, what: &str| {
            for s in samples {
                if !classes.contains(&s.label) || s.domain != domain {
                    return Err(Error::invalid(format!(
                        "{what} holds class {} tagged {:?}",
                        s.label, s.domain
                    )));
                }
                if s.feature.shape() != [w, h, c] {
                    return Err(Error::invalid(format!(
                        "sample of class {} has shape {:?}, expected {:?}",
                        s.label,
                        s.feature.shape(),
                        [w, h, c]
                    )));
                }
            }
            Ok(())
        };
        check(&self.train_seen, &self.seen_classes, Domain::Seen, "train_seen")?;
        check(&self.val_seen, &self.seen_classes, Domain::Seen, "val_seen")?;
        check(&self.test_seen, &self.seen_classes, Domain::Seen, "test_seen")?;
        check(&self.test_unseen, &self.unseen_classes, Domain::Unseen, "test_unseen")?;
        Ok(())
    }
}

fn parse_num<T: std::str::FromStr>(tok: Option<&str>, what: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::parse(format!("missing {what}")))?;
    tok.parse().map_err(|_| Error::parse(format!("bad {what}: {tok:?}")))
}

fn parse_real(tok: &str) -> Result<f64> {
    let v: f64 = tok.parse().map_err(|_| Error::parse(format!("bad real {tok:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(format!("non-finite real {tok:?}")));
    }
    Ok(v)
}

struct Splits {
    seen: BTreeSet<ClassId>,
    unseen: BTreeSet<ClassId>,
    val_fraction: f64,
    test_fraction: f64,
}

fn parse_splits(text: &str) -> Result<Splits> {
    let mut seen = None;
    let mut unseen = None;
    let mut val_fraction = None;
    let mut test_fraction = 0.2;
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::parse(format!("splits line without ':' {line:?}")))?;
        let ids = |rest: &str| -> Result<Vec<ClassId>> {
            rest.split_whitespace().map(|t| parse_num(Some(t), "class id")).collect()
        };
        match key.trim() {
            "seen" => {
                let list = ids(rest)?;
                let set: BTreeSet<_> = list.iter().copied().collect();
                if set.len() != list.len() {
                    return Err(Error::invalid("duplicate id in seen list"));
                }
                seen = Some(set);
            }
            "unseen" => {
                let list = ids(rest)?;
                let set: BTreeSet<_> = list.iter().copied().collect();
                if set.len() != list.len() {
                    return Err(Error::invalid("duplicate id in unseen list"));
                }
                unseen = Some(set);
            }
            "val_fraction" => val_fraction = Some(parse_real(rest.trim())?),
            "test_fraction" => test_fraction = parse_real(rest.trim())?,
            other => return Err(Error::parse(format!("unknown splits key {other:?}"))),
        }
    }
    let val_fraction = val_fraction.ok_or_else(|| Error::parse("splits missing val_fraction"))?;
    if !(0.0..1.0).contains(&val_fraction)
        || !(0.0..1.0).contains(&test_fraction)
        || val_fraction + test_fraction >= 1.0
    {
        return Err(Error::invalid(format!(
            "fractions val={val_fraction} test={test_fraction} must be in [0,1) and sum below 1"
        )));
    }
    Ok(Splits {
        seen: seen.ok_or_else(|| Error::parse("splits missing seen list"))?,
        unseen: unseen.ok_or_else(|| Error::parse("splits missing unseen list"))?,
        val_fraction,
        test_fraction,
    })
}

fn parse_attributes(text: &str) -> Result<Vec<SemanticLabel>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let mut header = lines
        .next()
        .ok_or_else(|| Error::parse("empty attributes file"))?
        .split_whitespace();
    let n: usize = parse_num(header.next(), "class count")?;
    let a: usize = parse_num(header.next(), "attribute dimension")?;
    let mut out = Vec::with_capacity(n);
    for line in lines {
        let mut toks = line.split_whitespace();
        let class_id: ClassId = parse_num(toks.next(), "class id")?;
        let values = toks.map(parse_real).collect::<Result<Vec<_>>>()?;
        if values.len() != a {
            return Err(Error::invalid(format!(
                "class {class_id} has {} attributes, header says {a}",
                values.len()
            )));
        }
        out.push(SemanticLabel { class_id, attributes: Tensor::vector(values)? });
    }
    if out.len() != n {
        return Err(Error::parse(format!("header promises {n} classes, found {}", out.len())));
    }
    out.sort_by_key(|s| s.class_id);
    Ok(out)
}

fn parse_features(text: &str) -> Result<((usize, usize, usize), Vec<Sample>)> {
    let mut toks = text.split_whitespace();
    let w: usize = parse_num(toks.next(), "W")?;
    let h: usize = parse_num(toks.next(), "H")?;
    let c: usize = parse_num(toks.next(), "C")?;
    let n: usize = parse_num(toks.next(), "sample count")?;
    let len = w * h * c;
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let label: ClassId = parse_num(toks.next(), "sample class id")?;
        let domain = match parse_num::<u8>(toks.next(), "domain flag")? {
            0 => Domain::Seen,
            1 => Domain::Unseen,
            f => return Err(Error::parse(format!("sample {i}: domain flag {f} is not 0 or 1"))),
        };
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            let tok = toks
                .next()
                .ok_or_else(|| Error::parse(format!("sample {i} is truncated")))?;
            data.push(parse_real(tok)?);
        }
        samples.push(Sample { feature: Tensor::new(&[w, h, c], data)?, label, domain });
    }
    if toks.next().is_some() {
        return Err(Error::parse("trailing data after the last sample"));
    }
    Ok(((w, h, c), samples))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn load_dataset(features: &Path, attributes: &Path, splits: &Path) -> Result<GzslDataset> {
    let splits = parse_splits(&read(splits)?)?;
    let semantics = parse_attributes(&read(attributes)?)?;
    let (feat_dims, samples) = parse_features(&read(features)?)?;
    assemble(feat_dims, samples, semantics, splits)
}

/// Loads `features.txt`, `attributes.txt` and `splits.txt` from `dir`.
pub fn load_dir(dir: &Path) -> Result<GzslDataset> {
    load_dataset(&dir.join(FEATURES_FILE), &dir.join(ATTRIBUTES_FILE), &dir.join(SPLITS_FILE))
}

fn split_counts(n: usize, val_fraction: f64, test_fraction: f64) -> (usize, usize, usize) {
    let n_test = ((n as f64) * test_fraction).round() as usize;
    let n_val = (((n as f64) * val_fraction).round() as usize).min(n - n_test);
    (n - n_val - n_test, n_val, n_test)
}

fn assemble(
    feat_dims: (usize, usize, usize),
    samples: Vec<Sample>,
    semantics: Vec<SemanticLabel>,
    splits: Splits,
) -> Result<GzslDataset> {
    if let Some(c) = splits.seen.intersection(&splits.unseen).next() {
        return Err(Error::invalid(format!("class {c} is listed as both seen and unseen")));
    }
    let mut per_class: BTreeMap<ClassId, Vec<Sample>> = BTreeMap::new();
    let mut test_unseen = Vec::new();
    for s in samples {
        let expected = if splits.seen.contains(&s.label) {
            Domain::Seen
        } else if splits.unseen.contains(&s.label) {
            Domain::Unseen
        } else {
            return Err(Error::invalid(format!("sample class {} is in neither split", s.label)));
        };
        if s.domain != expected {
            return Err(Error::invalid(format!(
                "sample of class {} is flagged {:?} but the class is {:?}",
                s.label, s.domain, expected
            )));
        }
        match expected {
            Domain::Seen => per_class.entry(s.label).or_default().push(s),
            Domain::Unseen => test_unseen.push(s),
        }
    }
    let (mut train_seen, mut val_seen, mut test_seen) = (Vec::new(), Vec::new(), Vec::new());
    for (_, mut list) in per_class {
        let (n_train, n_val, _) = split_counts(list.len(), splits.val_fraction, splits.test_fraction);
        let test = list.split_off(n_train + n_val);
        let val = list.split_off(n_train);
        train_seen.extend(list);
        val_seen.extend(val);
        test_seen.extend(test);
    }
    test_unseen.sort_by_key(|s| s.label);
    let ds = GzslDataset {
        feat_dims,
        train_seen,
        val_seen,
        test_seen,
        test_unseen,
        semantics,
        seen_classes: splits.seen,
        unseen_classes: splits.unseen,
        val_fraction: splits.val_fraction,
        test_fraction: splits.test_fraction,
    };
    ds.validate()?;
    Ok(ds)
}

fn join_reals(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v}").unwrap();
    }
}

/// Renders the three files as strings: `(features, attributes, splits)`.
pub fn render_dataset(ds: &GzslDataset) -> (String, String, String) {
    let (w, h, c) = ds.feat_dims;
    let mut ordered: Vec<&Sample> = Vec::new();
    for class in &ds.seen_classes {
        for part in [&ds.train_seen, &ds.val_seen, &ds.test_seen] {
            ordered.extend(part.iter().filter(|s| s.label == *class));
        }
    }
    for class in &ds.unseen_classes {
        ordered.extend(ds.test_unseen.iter().filter(|s| s.label == *class));
    }
    let mut features = format!("{w} {h} {c} {}\n", ordered.len());
    for s in ordered {
        writeln!(features, "{} {}", s.label, s.domain.flag()).unwrap();
        join_reals(&mut features, s.feature.data());
        features.push('\n');
    }

    let mut attributes = format!("{} {}\n", ds.semantics.len(), ds.attr_dim());
    for s in &ds.semantics {
        write!(attributes, "{} ", s.class_id).unwrap();
        join_reals(&mut attributes, s.attributes.data());
        attributes.push('\n');
    }

    let ids = |set: &BTreeSet<ClassId>| {
        set.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
    };
    let splits = format!(
        "seen: {}\nunseen: {}\nval_fraction: {}\ntest_fraction: {}\n",
        ids(&ds.seen_classes),
        ids(&ds.unseen_classes),
        ds.val_fraction,
        ds.test_fraction
    );
    (features, attributes, splits)
}

pub fn write_dataset(ds: &GzslDataset, features: &Path, attributes: &Path, splits: &Path) -> Result<()> {
    let (f, a, s) = render_dataset(ds);
    fs::write(features, f)?;
    fs::write(attributes, a)?;
    fs::write(splits, s)?;
    Ok(())
}

/// Writes the three standard file names into `dir`, creating it if needed.
pub fn write_dir(ds: &GzslDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_dataset(ds, &dir.join(FEATURES_FILE), &dir.join(ATTRIBUTES_FILE), &dir.join(SPLITS_FILE))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub attr_dim: usize,
    pub feat_dims: (usize, usize, usize),
    pub samples_per_class: usize,
    pub noise_scale: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_seen: 8,
            n_unseen: 4,
            attr_dim: 16,
            feat_dims: (4, 4, 32),
            samples_per_class: 50,
            noise_scale: 0.3,
            seed: 1,
            val_fraction: 0.2,
            test_fraction: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (w, h, c) = self.feat_dims;
        if self.n_seen == 0
            || self.n_unseen == 0
            || self.attr_dim == 0
            || w == 0
            || h == 0
            || c == 0
            || self.samples_per_class == 0
        {
            return Err(Error::invalid("synthetic dataset counts must be positive"));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid(format!("noise_scale must be positive, got {}", self.noise_scale)));
        }
        if !(0.0..1.0).contains(&self.val_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || self.val_fraction + self.test_fraction >= 1.0
        {
            return Err(Error::invalid("split fractions must be in [0,1) and sum below 1"));
        }
        Ok(())
    }
}

/// Gaussian `c×a` map with its columns Gram-Schmidt orthonormalized when
/// `c ≥ a`, so class-mean cosines track attribute cosines.
fn random_map(rng: &mut Rng, c: usize, a: usize) -> Tensor {
    let mut m = rng.normal_tensor(&[c, a], 1.0 / (a as f64).sqrt());
    if c < a {
        return m;
    }
    let d = m.data_mut();
    for j in 0..a {
        for k in 0..j {
            let dot: f64 = (0..c).map(|i| d[i * a + j] * d[i * a + k]).sum();
            for i in 0..c {
                d[i * a + j] -= dot * d[i * a + k];
            }
        }
        let norm = (0..c).map(|i| d[i * a + j].powi(2)).sum::<f64>().sqrt();
        for i in 0..c {
            d[i * a + j] /= norm;
        }
    }
    m
}

const STREAM_ATTRIBUTES: u64 = 0;
const STREAM_MAP: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Seeded synthetic dataset.
///
/// Class attributes are uniform in `[0,1]^A`; class feature means are
/// `M·a` for one random map `M` (orthonormal columns when `C ≥ A`) shared
/// by both domains; each sample tiles
/// its class mean over all `W·H` positions and adds Gaussian noise of scale
/// `noise_scale` per position and channel. Seen classes take ids
/// `0..n_seen`, unseen classes the ids after them.
pub fn synth_gzsl(config: &SynthConfig) -> Result<GzslDataset> {
    config.validate()?;
    let (w, h, c) = config.feat_dims;
    let n_classes = config.n_seen + config.n_unseen;
    let a = config.attr_dim;

    let mut attr_rng = Rng::stream(config.seed, STREAM_ATTRIBUTES);
    let semantics: Vec<SemanticLabel> = (0..n_classes)
        .map(|k| SemanticLabel {
            class_id: k as ClassId,
            attributes: attr_rng.uniform_tensor(&[a], 0.0, 1.0),
        })
        .collect();

    let map = random_map(&mut Rng::stream(config.seed, STREAM_MAP), c, a);
    let mut noise = Rng::stream(config.seed, STREAM_NOISE);

    let mut samples = Vec::with_capacity(n_classes * config.samples_per_class);
    for sem in &semantics {
        let mean = map.matmul(&sem.attributes.reshape(&[a, 1])?)?;
        let domain = if (sem.class_id as usize) < config.n_seen { Domain::Seen } else { Domain::Unseen };
        for _ in 0..config.samples_per_class {
            let mut data = Vec::with_capacity(w * h * c);
            for _ in 0..w * h {
                data.extend(mean.data().iter().map(|&m| m + noise.normal(0.0, config.noise_scale)));
            }
            samples.push(Sample { feature: Tensor::new(&[w, h, c], data)?, label: sem.class_id, domain });
        }
    }

    let seen = (0..config.n_seen as ClassId).collect();
    let unseen = (config.n_seen as ClassId..n_classes as ClassId).collect();
    assemble(
        config.feat_dims,
        samples,
        semantics,
        Splits { seen, unseen, val_fraction: config.val_fraction, test_fraction: config.test_fraction },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    const FEATURES: &str = "1 1 2 6\n\
        0 0\n1 0\n0 0\n1.5 0\n0 0\n2 0\n\
        1 0\n0 1\n1 0\n0 2\n\
        7 1\n1 1\n";
    const ATTRS: &str = "3 2\n0 1 0\n1 0 1\n7 1 1\n";
    const SPLITS: &str = "seen: 0 1\nunseen: 7\nval_fraction: 0.34\ntest_fraction: 0.34\n";

    fn from_strings(f: &str, a: &str, s: &str) -> Result<GzslDataset> {
        assemble(
            parse_features(f)?.0,
            parse_features(f)?.1,
            parse_attributes(a)?,
            parse_splits(s)?,
        )
    }

    #[test]
    fn toy_files_load() {
        let ds = from_strings(FEATURES, ATTRS, SPLITS).unwrap();
        assert_eq!(ds.seen_ids(), vec![0, 1]);
        assert_eq!(ds.unseen_ids(), vec![7]);
        // class 0 has 3 samples: 1 train, 1 val, 1 test
        assert_eq!(ds.train_seen.iter().filter(|s| s.label == 0).count(), 1);
        assert_eq!(ds.val_seen.iter().filter(|s| s.label == 0).count(), 1);
        assert_eq!(ds.test_seen[0].feature.data(), &[2.0, 0.0]);
        assert_eq!(ds.test_unseen.len(), 1);
    }

    #[test]
    fn overlapping_class_sets_rejected() {
        let splits = "seen: 0 1 7\nunseen: 7\nval_fraction: 0.2\n";
        assert!(matches!(from_strings(FEATURES, ATTRS, splits), Err(Error::Validation(_))));
    }

    #[test]
    fn ragged_attributes_rejected() {
        let attrs = "3 2\n0 1 0\n1 0 1 1\n7 1 1\n";
        assert!(matches!(from_strings(FEATURES, attrs, SPLITS), Err(Error::Validation(_))));
    }

    #[test]
    fn missing_class_attribute_rejected() {
        let attrs = "2 2\n0 1 0\n1 0 1\n";
        assert!(matches!(from_strings(FEATURES, attrs, SPLITS), Err(Error::Validation(_))));
    }

    #[test]
    fn domain_flag_must_match_split() {
        let f = "1 1 1 1\n0 1\n0.5\n";
        let a = "2 1\n0 1\n1 1\n";
        let s = "seen: 0\nunseen: 1\nval_fraction: 0\n";
        assert!(matches!(from_strings(f, a, s), Err(Error::Validation(_))));
    }

    #[test]
    fn zero_attribute_vector_rejected() {
        let attrs = "3 2\n0 0 0\n1 0 1\n7 1 1\n";
        assert!(from_strings(FEATURES, attrs, SPLITS).is_err());
    }

    #[test]
    fn toy_round_trip_is_byte_identical() {
        let ds = from_strings(FEATURES, ATTRS, SPLITS).unwrap();
        let (f, a, s) = render_dataset(&ds);
        let again = from_strings(&f, &a, &s).unwrap();
        assert_eq!(again, ds);
        assert_eq!(render_dataset(&again), (f, a, s));
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig { samples_per_class: 5, ..Default::default() };
        let a = render_dataset(&synth_gzsl(&cfg).unwrap());
        let b = render_dataset(&synth_gzsl(&cfg).unwrap());
        assert_eq!(a, b);
        let other = render_dataset(&synth_gzsl(&SynthConfig { seed: 2, ..cfg }).unwrap());
        assert_ne!(a.0, other.0);
    }

    #[test]
    fn vanishing_noise_makes_class_samples_identical() {
        let cfg = SynthConfig { samples_per_class: 5, noise_scale: 1e-300, ..Default::default() };
        let ds = synth_gzsl(&cfg).unwrap();
        let first = &ds.test_unseen[0];
        for s in ds.test_unseen.iter().filter(|s| s.label == first.label) {
            assert_eq!(s.feature, first.feature);
        }
    }

    #[test]
    fn synth_rejects_bad_config() {
        assert!(synth_gzsl(&SynthConfig { noise_scale: 0.0, ..Default::default() }).is_err());
        assert!(synth_gzsl(&SynthConfig { n_unseen: 0, ..Default::default() }).is_err());
    }

    #[test]
    fn synth_split_sizes() {
        let ds = synth_gzsl(&SynthConfig::default()).unwrap();
        assert_eq!(ds.train_seen.len(), 8 * 30);
        assert_eq!(ds.val_seen.len(), 8 * 10);
        assert_eq!(ds.test_seen.len(), 8 * 10);
        assert_eq!(ds.test_unseen.len(), 4 * 50);
    }
}
