//! Synthetic Gaussian domain shift and the feature CSV format.
//!
//! Source class `c` is drawn from `N(m_c, S_c)`. Its target counterpart is
//! `N(m_c + Δμ_c, D R S_c Rᵀ D)` where `R` rotates the plane of the first
//! two coordinates and `D = diag(sqrt(scale))`, so a uniform scale `s`
//! multiplies the covariance by `s`.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SohotError};
use crate::tensor::Domain;

/// Source-domain Gaussian of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// How one class moves from the source to the target domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetTransform {
    /// Rotation of the covariance in the (0, 1) plane, in degrees.
    pub rotation_deg: f64,
    /// Per-axis variance multipliers.
    pub scale: DVector<f64>,
    /// Mean offset `Δμ`.
    pub offset: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub source: Vec<ClassGaussian>,
    pub target: Vec<TargetTransform>,
    pub n_src_train: usize,
    pub n_tgt_train: usize,
    pub n_src_test: usize,
    pub n_tgt_test: usize,
    pub seed: u64,
}

/// The scalar knobs the CLI exposes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftKnobs {
    pub classes: usize,
    pub dim: usize,
    pub rot_deg: f64,
    pub mean_shift: f64,
    pub scale: f64,
    pub n_src: usize,
    pub n_tgt: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for ShiftKnobs {
    fn default() -> Self {
        Self {
            classes: 3,
            dim: 2,
            rot_deg: 30.0,
            mean_shift: 1.0,
            scale: 1.0,
            n_src: 20,
            n_tgt: 3,
            n_test: 200,
            seed: 0,
        }
    }
}

/// Radius of the circle the class means sit on.
pub const MEAN_RADIUS: f64 = 0.8;
/// Standard deviations along and across the radial direction.
pub const RADIAL_STD: f64 = 1.0;
pub const TANGENTIAL_STD: f64 = 0.25;
/// Standard deviation of coordinates beyond the first two.
pub const EXTRA_STD: f64 = 0.5;

fn rotation(dim: usize, radians: f64) -> DMatrix<f64> {
    let mut r = DMatrix::identity(dim, dim);
    if dim >= 2 {
        let (s, c) = radians.sin_cos();
        r[(0, 0)] = c;
        r[(0, 1)] = -s;
        r[(1, 0)] = s;
        r[(1, 1)] = c;
    }
    r
}

impl ShiftSpec {
    /// Class means evenly spaced on a circle in the (0, 1) plane, each
    /// scatter elongated radially; the target rotates every scatter by
    /// `rot_deg` and moves every mean by `mean_shift` along the tangent.
    pub fn from_knobs(k: &ShiftKnobs) -> Result<Self> {
        if k.classes < 2 {
            return Err(SohotError::arg("--classes must be at least 2"));
        }
        if k.dim == 0 {
            return Err(SohotError::arg("--dim must be at least 1"));
        }
        if !k.mean_shift.is_finite() {
            return Err(SohotError::arg("--mean-shift must be finite"));
        }
        if !(k.scale.is_finite() && k.scale > 0.0) {
            return Err(SohotError::arg("--scale must be finite and positive"));
        }
        let d = k.dim;
        let mut source = Vec::with_capacity(k.classes);
        let mut target = Vec::with_capacity(k.classes);
        for c in 0..k.classes {
            let angle = 2.0 * std::f64::consts::PI * c as f64 / k.classes as f64;
            let (s, co) = angle.sin_cos();
            let mut mean = DVector::zeros(d);
            let mut offset = DVector::zeros(d);
            let mut cov = DMatrix::from_diagonal_element(d, d, EXTRA_STD * EXTRA_STD);
            if d == 1 {
                mean[0] = MEAN_RADIUS * (c as f64 - (k.classes - 1) as f64 / 2.0);
                offset[0] = k.mean_shift;
                cov[(0, 0)] = TANGENTIAL_STD * TANGENTIAL_STD;
            } else {
                mean[0] = MEAN_RADIUS * co;
                mean[1] = MEAN_RADIUS * s;
                offset[0] = -k.mean_shift * s;
                offset[1] = k.mean_shift * co;
                let basis = rotation(2, angle);
                let block = &basis
                    * DMatrix::from_diagonal(&DVector::from_vec(vec![
                        RADIAL_STD * RADIAL_STD,
                        TANGENTIAL_STD * TANGENTIAL_STD,
                    ]))
                    * basis.transpose();
                cov.view_mut((0, 0), (2, 2))
                    .copy_from(&((&block + block.transpose()) * 0.5));
            }
            source.push(ClassGaussian { mean, cov });
            target.push(TargetTransform {
                rotation_deg: k.rot_deg,
                scale: DVector::from_element(d, k.scale),
                offset,
            });
        }
        let spec = Self {
            num_classes: k.classes,
            input_dim: d,
            source,
            target,
            n_src_train: k.n_src,
            n_tgt_train: k.n_tgt,
            n_src_test: k.n_test,
            n_tgt_test: k.n_test,
            seed: k.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Three classes in the plane, 30 degree rotation, unit mean shift,
    /// 20 source and 3 target training samples per class, 200 test samples
    /// per class and domain.
    pub fn benchmark(seed: u64) -> Self {
        Self::from_knobs(&ShiftKnobs {
            seed,
            ..ShiftKnobs::default()
        })
        .expect("benchmark knobs are valid")
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.input_dim;
        if self.num_classes < 2 || d == 0 {
            return Err(SohotError::arg("need at least two classes and one input dimension"));
        }
        if self.source.len() != self.num_classes || self.target.len() != self.num_classes {
            return Err(SohotError::arg(
                "one source Gaussian and one target transform per class",
            ));
        }
        for (c, (g, t)) in self.source.iter().zip(&self.target).enumerate() {
            if g.mean.len() != d || g.cov.shape() != (d, d) || t.scale.len() != d || t.offset.len() != d {
                return Err(SohotError::shape(format!("class {c}: parameter dimension mismatch")));
            }
            if g.mean
                .iter()
                .chain(g.cov.iter())
                .chain(t.offset.iter())
                .any(|v| !v.is_finite())
            {
                return Err(SohotError::arg(format!("class {c}: non-finite parameter")));
            }
            let asym = (&g.cov - g.cov.transpose()).amax();
            if asym > 1e-12 * g.cov.amax() || g.cov.clone().cholesky().is_none() {
                return Err(SohotError::arg(format!(
                    "class {c}: covariance is not symmetric positive definite"
                )));
            }
            if !(0.0..180.0).contains(&t.rotation_deg) {
                return Err(SohotError::arg(format!(
                    "class {c}: rotation must lie in [0, 180) degrees"
                )));
            }
            if t.scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
                return Err(SohotError::arg(format!("class {c}: scale must be finite and positive")));
            }
        }
        Ok(())
    }

    /// Mean and covariance of class `c` in `domain`.
    pub fn class_distribution(&self, c: usize, domain: Domain) -> (DVector<f64>, DMatrix<f64>) {
        let g = &self.source[c];
        match domain {
            Domain::Source => (g.mean.clone(), g.cov.clone()),
            Domain::Target => {
                let t = &self.target[c];
                let r = rotation(self.input_dim, t.rotation_deg.to_radians());
                let dd = DMatrix::from_diagonal(&t.scale.map(f64::sqrt));
                let cov = &dd * &r * &g.cov * r.transpose() * &dd;
                // Keep it exactly symmetric for the Cholesky factorization.
                let cov = (&cov + cov.transpose()) * 0.5;
                (&g.mean + &t.offset, cov)
            }
        }
    }
}

/// Inputs (one column per sample) with their labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub inputs: DMatrix<f64>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn empty(dim: usize) -> Self {
        Self {
            inputs: DMatrix::zeros(dim, 0),
            labels: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.nrows()
    }

    /// Number of samples carrying each label in `0..classes`.
    pub fn class_counts(&self, classes: usize) -> Vec<usize> {
        let mut counts = vec![0; classes];
        for &y in &self.labels {
            if y < classes {
                counts[y] += 1;
            }
        }
        counts
    }

    fn from_columns(dim: usize, cols: Vec<f64>, labels: Vec<usize>) -> Self {
        Self {
            inputs: DMatrix::from_vec(dim, labels.len(), cols),
            labels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Source and target data, each with a training and a test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    pub num_classes: usize,
    pub source_train: LabeledSet,
    pub source_test: LabeledSet,
    pub target_train: LabeledSet,
    pub target_test: LabeledSet,
}

impl DomainDataset {
    pub fn dim(&self) -> usize {
        self.source_train.dim()
    }

    pub fn split(&self, domain: Domain, split: Split) -> &LabeledSet {
        match (domain, split) {
            (Domain::Source, Split::Train) => &self.source_train,
            (Domain::Source, Split::Test) => &self.source_test,
            (Domain::Target, Split::Train) => &self.target_train,
            (Domain::Target, Split::Test) => &self.target_test,
        }
    }

    fn split_mut(&mut self, domain: Domain, split: Split) -> &mut LabeledSet {
        match (domain, split) {
            (Domain::Source, Split::Train) => &mut self.source_train,
            (Domain::Source, Split::Test) => &mut self.source_test,
            (Domain::Target, Split::Train) => &mut self.target_train,
            (Domain::Target, Split::Test) => &mut self.target_test,
        }
    }

    pub fn total_len(&self) -> usize {
        SPLITS.iter().map(|&(d, s)| self.split(d, s).len()).sum()
    }
}

/// File and generation order of the four splits.
pub const SPLITS: [(Domain, Split); 4] = [
    (Domain::Source, Split::Train),
    (Domain::Source, Split::Test),
    (Domain::Target, Split::Train),
    (Domain::Target, Split::Test),
];

/// Draws every split, class by class, from one seeded stream.
pub fn generate(spec: &ShiftSpec) -> Result<DomainDataset> {
    spec.validate()?;
    let d = spec.input_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut factors = Vec::with_capacity(2 * spec.num_classes);
    for domain in [Domain::Source, Domain::Target] {
        for c in 0..spec.num_classes {
            let (mean, cov) = spec.class_distribution(c, domain);
            let chol = cov.cholesky().ok_or_else(|| {
                SohotError::arg(format!(
                    "class {c}: {} covariance is not positive definite",
                    domain.as_str()
                ))
            })?;
            factors.push((mean, chol.l()));
        }
    }
    let mut dataset = DomainDataset {
        num_classes: spec.num_classes,
        source_train: LabeledSet::empty(d),
        source_test: LabeledSet::empty(d),
        target_train: LabeledSet::empty(d),
        target_test: LabeledSet::empty(d),
    };
    for (domain, split) in SPLITS {
        let per_class = match (domain, split) {
            (Domain::Source, Split::Train) => spec.n_src_train,
            (Domain::Source, Split::Test) => spec.n_src_test,
            (Domain::Target, Split::Train) => spec.n_tgt_train,
            (Domain::Target, Split::Test) => spec.n_tgt_test,
        };
        let offset = if domain == Domain::Source { 0 } else { spec.num_classes };
        let mut cols = Vec::with_capacity(per_class * spec.num_classes * d);
        let mut labels = Vec::with_capacity(per_class * spec.num_classes);
        for c in 0..spec.num_classes {
            let (mean, l) = &factors[offset + c];
            for _ in 0..per_class {
                let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
                let x = mean + l * z;
                cols.extend(x.iter());
                labels.push(c);
            }
        }
        *dataset.split_mut(domain, split) = LabeledSet::from_columns(d, cols, labels);
    }
    Ok(dataset)
}

/// Writes the dataset as `domain,split,label,f0,...` rows. Values use the
/// shortest decimal form that parses back to the same `f64`.
pub fn write_features<W: Write>(dataset: &DomainDataset, out: W) -> Result<()> {
    let d = dataset.dim();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec!["domain".to_string(), "split".to_string(), "label".to_string()];
    header.extend((0..d).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(csv_io)?;
    let mut row = Vec::with_capacity(d + 3);
    for (domain, split) in SPLITS {
        let set = dataset.split(domain, split);
        for (j, &y) in set.labels.iter().enumerate() {
            row.clear();
            row.push(domain.as_str().to_string());
            row.push(split.as_str().to_string());
            row.push(y.to_string());
            row.extend(set.inputs.column(j).iter().map(|v| format!("{v}")));
            w.write_record(&row).map_err(csv_io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_features(dataset: &DomainDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = File::create(path)?;
    write_features(dataset, std::io::BufWriter::new(file))
}

fn csv_io(e: csv::Error) -> SohotError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => SohotError::Io(io),
        other => SohotError::Parse {
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn parse_err(line: u64, msg: impl Into<String>) -> SohotError {
    SohotError::Parse { line, msg: msg.into() }
}

/// Parses the feature CSV. The number of classes is one more than the
/// largest label seen.
pub fn read_features<R: Read>(input: R) -> Result<DomainDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = rdr.headers().map_err(csv_io)?.clone();
    let fields: Vec<&str> = header.iter().collect();
    if fields.len() < 4 || fields[..3] != ["domain", "split", "label"] {
        return Err(parse_err(1, "header must start with domain,split,label followed by f0"));
    }
    let d = fields.len() - 3;
    for (i, name) in fields[3..].iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(parse_err(1, format!("expected feature column f{i}, found {name:?}")));
        }
    }
    let mut cols: [Vec<f64>; 4] = Default::default();
    let mut labels: [Vec<usize>; 4] = Default::default();
    let mut record = csv::StringRecord::new();
    let mut rows = 0usize;
    loop {
        match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => return Err(csv_io(e)),
        }
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != d + 3 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", d + 3, record.len()),
            ));
        }
        let domain = match &record[0] {
            "source" => Domain::Source,
            "target" => Domain::Target,
            other => return Err(parse_err(line, format!("unknown domain {other:?}"))),
        };
        let split = match &record[1] {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(parse_err(line, format!("unknown split {other:?}"))),
        };
        let label: usize = record[2]
            .parse()
            .map_err(|_| parse_err(line, format!("label {:?} is not a non-negative integer", &record[2])))?;
        let slot = SPLITS
            .iter()
            .position(|&s| s == (domain, split))
            .expect("all pairs listed");
        for (i, field) in record.iter().skip(3).enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| parse_err(line, format!("feature f{i} {field:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("feature f{i} is not finite")));
            }
            cols[slot].push(v);
        }
        labels[slot].push(label);
        rows += 1;
    }
    if rows == 0 {
        return Err(SohotError::EmptyDataset("feature file has a header but no rows".into()));
    }
    let num_classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
    let mut sets = cols
        .into_iter()
        .zip(labels)
        .map(|(c, l)| LabeledSet::from_columns(d, c, l));
    let mut next = || sets.next().expect("four splits");
    Ok(DomainDataset {
        num_classes,
        source_train: next(),
        source_test: next(),
        target_train: next(),
        target_test: next(),
    })
}

pub fn load_features(path: impl AsRef<Path>) -> Result<DomainDataset> {
    let file = File::open(path)?;
    read_features(std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::compute_mean;

    fn knobs(rot: f64, shift: f64, n: usize) -> ShiftKnobs {
        ShiftKnobs {
            rot_deg: rot,
            mean_shift: shift,
            n_src: n,
            n_tgt: n,
            n_test: 0,
            ..ShiftKnobs::default()
        }
    }

    fn class_columns(set: &LabeledSet, c: usize) -> DMatrix<f64> {
        let idx: Vec<usize> = (0..set.len()).filter(|&j| set.labels[j] == c).collect();
        set.inputs.select_columns(idx.iter())
    }

    /// Standard error of the difference of two sample means along `dir`.
    fn mean_diff_se(spec: &ShiftSpec, c: usize, dir: &DVector<f64>, n: usize, nt: usize) -> f64 {
        let (_, s) = spec.class_distribution(c, Domain::Source);
        let (_, t) = spec.class_distribution(c, Domain::Target);
        ((dir.dot(&(&s * dir)) / n as f64) + (dir.dot(&(&t * dir)) / nt as f64)).sqrt()
    }

    #[test]
    fn zero_shift_gives_matching_means() {
        let spec = ShiftSpec::from_knobs(&knobs(0.0, 0.0, 400)).unwrap();
        let data = generate(&spec).unwrap();
        for c in 0..3 {
            let ms = compute_mean(&class_columns(&data.source_train, c)).unwrap();
            let mt = compute_mean(&class_columns(&data.target_train, c)).unwrap();
            for i in 0..2 {
                let mut e = DVector::zeros(2);
                e[i] = 1.0;
                let se = mean_diff_se(&spec, c, &e, 400, 400);
                assert!((ms[i] - mt[i]).abs() < 3.0 * se, "class {c} axis {i}");
            }
        }
    }

    #[test]
    fn large_mean_shift_is_recovered() {
        let shift = 5.0;
        let spec = ShiftSpec::from_knobs(&knobs(0.0, shift, 1000)).unwrap();
        let data = generate(&spec).unwrap();
        for c in 0..3 {
            let ms = compute_mean(&class_columns(&data.source_train, c)).unwrap();
            let mt = compute_mean(&class_columns(&data.target_train, c)).unwrap();
            let diff = &mt - &ms;
            let dir = spec.target[c].offset.normalize();
            let se = mean_diff_se(&spec, c, &dir, 1000, 1000);
            assert!((diff.norm() - shift).abs() < 3.0 * se, "class {c}: {}", diff.norm());
        }
    }

    #[test]
    fn benchmark_shapes() {
        let data = generate(&ShiftSpec::benchmark(3)).unwrap();
        assert_eq!(data.num_classes, 3);
        assert_eq!(data.dim(), 2);
        assert_eq!(data.source_train.class_counts(3), vec![20; 3]);
        assert_eq!(data.target_train.class_counts(3), vec![3; 3]);
        assert_eq!(data.source_test.class_counts(3), vec![200; 3]);
        assert_eq!(data.target_test.class_counts(3), vec![200; 3]);
        assert_eq!(data.total_len(), 3 * (20 + 3 + 2 * 200));
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&ShiftSpec::benchmark(11)).unwrap();
        let b = generate(&ShiftSpec::benchmark(11)).unwrap();
        let c = generate(&ShiftSpec::benchmark(12)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn higher_dimensions_rotate_only_the_first_plane() {
        let spec = ShiftSpec::from_knobs(&ShiftKnobs {
            dim: 4,
            ..ShiftKnobs::default()
        })
        .unwrap();
        let (_, t) = spec.class_distribution(1, Domain::Target);
        assert_eq!(t[(2, 2)], EXTRA_STD * EXTRA_STD);
        assert_eq!(t[(3, 0)], 0.0);
        let (_, s) = spec.class_distribution(1, Domain::Source);
        assert!(((t.trace()) - s.trace()).abs() < 1e-12);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = ShiftSpec::benchmark(0);
        spec.source[0].cov[(0, 0)] = -1.0;
        assert!(matches!(generate(&spec), Err(SohotError::Argument(_))));
        let mut spec = ShiftSpec::benchmark(0);
        spec.target[1].rotation_deg = 180.0;
        assert!(matches!(spec.validate(), Err(SohotError::Argument(_))));
        assert!(ShiftSpec::from_knobs(&ShiftKnobs {
            rot_deg: -5.0,
            ..ShiftKnobs::default()
        })
        .is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let data = generate(&ShiftSpec::benchmark(5)).unwrap();
        let mut buf = Vec::new();
        write_features(&data, &mut buf).unwrap();
        let back = read_features(buf.as_slice()).unwrap();
        assert_eq!(back, data);
    }

    #[test]
    fn header_only_is_empty() {
        let err = read_features("domain,split,label,f0,f1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, SohotError::EmptyDataset(_)));
    }

    #[test]
    fn accepts_missing_trailing_newline() {
        let data = read_features("domain,split,label,f0\nsource,train,1,0.5\ntarget,test,0,-2".as_bytes()).unwrap();
        assert_eq!(data.num_classes, 2);
        assert_eq!(data.source_train.inputs[(0, 0)], 0.5);
        assert_eq!(data.target_test.inputs[(0, 0)], -2.0);
    }

    #[test]
    fn malformed_row_reports_its_line() {
        let mut text = String::from("domain,split,label,f0,f1\n");
        for j in 0..20 {
            if j == 15 {
                text.push_str("source,train,0,1.0,abc\n");
            } else {
                text.push_str("source,train,0,1.0,2.0\n");
            }
        }
        match read_features(text.as_bytes()) {
            Err(SohotError::Parse { line, .. }) => assert_eq!(line, 17),
            other => panic!("expected parse error, got {other:?}"),
        }
        for bad in [
            "source,train,0,1.0\n",
            "elsewhere,train,0,1.0,2.0\n",
            "source,train,-1,1.0,2.0\n",
        ] {
            let text = format!("domain,split,label,f0,f1\n{bad}");
            assert!(
                matches!(read_features(text.as_bytes()), Err(SohotError::Parse { line: 2, .. })),
                "{bad}"
            );
        }
    }
}
