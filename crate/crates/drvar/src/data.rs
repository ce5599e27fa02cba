//! Observed-data representation, symbolic design specs, and the partitioned
//! joint parameter vector shared by all estimators.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observed triples (y, x, Z): outcome, binary treatment, covariates.
#[derive(Debug, Clone)]
pub struct Dataset {
    y: Array1<f64>,
    x: Array1<f64>,
    z: Array2<f64>,
    covariate_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        y: Array1<f64>,
        x: Array1<f64>,
        z: Array2<f64>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let n = y.len();
        if x.len() != n || z.nrows() != n {
            return Err(Error::Shape(format!(
                "y has {n} rows, x has {}, Z has {}",
                x.len(),
                z.nrows()
            )));
        }
        if z.ncols() != covariate_names.len() {
            return Err(Error::Shape(format!(
                "Z has {} columns but {} names given",
                z.ncols(),
                covariate_names.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &covariate_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Data(format!("duplicate covariate name '{name}'")));
            }
        }
        if n < 2 {
            return Err(Error::Data(format!("need at least 2 observations, got {n}")));
        }
        for (i, &xi) in x.iter().enumerate() {
            if xi != 0.0 && xi != 1.0 {
                return Err(Error::Data(format!(
                    "treatment must be exactly 0 or 1; row {i} has {xi}"
                )));
            }
        }
        if !x.iter().any(|&v| v == 1.0) || !x.iter().any(|&v| v == 0.0) {
            return Err(Error::Data(
                "need at least one treated and one control observation".to_string(),
            ));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite outcome value".to_string()));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite covariate value".to_string()));
        }
        Ok(Self { y, x, z, covariate_names })
    }

    /// Reads a dataset from a comma-separated file with a header row.
    ///
    /// `outcome` and `treatment` name the columns holding y and x; every
    /// remaining column becomes a covariate.
    pub fn from_csv(path: &std::path::Path, outcome: &str, treatment: &str) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let headers: Vec<String> = reader
            .headers()
            .map_err(|e| Error::Data(format!("bad CSV header: {e}")))?
            .iter()
            .map(|s| s.trim().to_string())
            .collect();
        let y_idx = headers
            .iter()
            .position(|h| h == outcome)
            .ok_or_else(|| Error::Config(format!("outcome column '{outcome}' not in header")))?;
        let x_idx = headers
            .iter()
            .position(|h| h == treatment)
            .ok_or_else(|| Error::Config(format!("treatment column '{treatment}' not in header")))?;
        if y_idx == x_idx {
            return Err(Error::Config(
                "outcome and treatment must be different columns".to_string(),
            ));
        }
        let cov_idx: Vec<usize> =
            (0..headers.len()).filter(|&i| i != y_idx && i != x_idx).collect();
        let covariate_names: Vec<String> = cov_idx.iter().map(|&i| headers[i].clone()).collect();

        let mut y = Vec::new();
        let mut x = Vec::new();
        let mut z_flat = Vec::new();
        for (row_no, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::Data(format!("CSV row {}: {e}", row_no + 2)))?;
            let parse = |idx: usize| -> Result<f64> {
                record
                    .get(idx)
                    .ok_or_else(|| Error::Data(format!("row {} too short", row_no + 2)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| {
                        Error::Data(format!(
                            "row {} column '{}': {e}",
                            row_no + 2,
                            headers[idx]
                        ))
                    })
            };
            let xi = parse(x_idx)?;
            if xi != 0.0 && xi != 1.0 {
                return Err(Error::Data(format!(
                    "treatment must be 0 or 1; row {} has {xi}",
                    row_no + 2
                )));
            }
            y.push(parse(y_idx)?);
            x.push(xi);
            for &ci in &cov_idx {
                z_flat.push(parse(ci)?);
            }
        }
        let n = y.len();
        let d = cov_idx.len();
        let z = Array2::from_shape_vec((n, d), z_flat)
            .map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(Array1::from(y), Array1::from(x), z, covariate_names)
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn y(&self) -> &Array1<f64> {
        &self.y
    }

    pub fn x(&self) -> &Array1<f64> {
        &self.x
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|c| c == name)
    }

    /// Returns the subset of rows given by `indices` (in order).
    pub fn select_rows(&self, indices: &[usize]) -> Result<Self> {
        let y = Array1::from_iter(indices.iter().map(|&i| self.y[i]));
        let x = Array1::from_iter(indices.iter().map(|&i| self.x[i]));
        let mut z = Array2::zeros((indices.len(), self.z.ncols()));
        for (row, &i) in indices.iter().enumerate() {
            z.row_mut(row).assign(&self.z.row(i));
        }
        Self::new(y, x, z, self.covariate_names.clone())
    }
}

/// Scalar transform applied to a covariate inside a design term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Identity,
    Sin,
}

impl Transform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Transform::Identity => v,
            Transform::Sin => v.sin(),
        }
    }
}

/// One covariate factor inside a term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    #[serde(default)]
    pub transform: Transform,
}

/// One design term: an elementwise product of transformed covariates,
/// optionally multiplied by the treatment indicator.
///
/// An empty factor list with `with_treatment = false` is the intercept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    #[serde(default)]
    pub factors: Vec<Factor>,
    #[serde(default)]
    pub with_treatment: bool,
}

impl Term {
    pub fn intercept() -> Self {
        Term { factors: Vec::new(), with_treatment: false }
    }

    /// Human-readable label, e.g. `intercept`, `sin(z1)`, `x*z1*z2`.
    pub fn label(&self) -> String {
        let mut parts: Vec<String> = Vec::new();
        if self.with_treatment {
            parts.push("x".to_string());
        }
        for f in &self.factors {
            parts.push(match f.transform {
                Transform::Identity => f.name.clone(),
                Transform::Sin => format!("sin({})", f.name),
            });
        }
        if parts.is_empty() {
            "intercept".to_string()
        } else {
            parts.join("*")
        }
    }
}

/// Ordered list of terms defining a PS or OR design matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DesignSpec {
    pub terms: Vec<Term>,
}

impl DesignSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        let spec = DesignSpec { terms };
        spec.check_internal()?;
        Ok(spec)
    }

    fn check_internal(&self) -> Result<()> {
        match self.terms.first() {
            Some(t) if *t == Term::intercept() => {}
            _ => {
                return Err(Error::Spec(
                    "first term must be the intercept (no factors, no treatment)".to_string(),
                ))
            }
        }
        for (i, a) in self.terms.iter().enumerate() {
            for b in &self.terms[i + 1..] {
                if a == b {
                    return Err(Error::Spec(format!("duplicate term at position {i}")));
                }
            }
        }
        Ok(())
    }

    /// Checks the spec against a dataset's covariate names.
    pub fn validate(&self, ds: &Dataset) -> Result<()> {
        self.check_internal()?;
        for term in &self.terms {
            for factor in &term.factors {
                if ds.covariate_index(&factor.name).is_none() {
                    return Err(Error::Spec(format!(
                        "unknown covariate '{}' (dataset has {:?})",
                        factor.name,
                        ds.covariate_names()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Whether any term involves the treatment indicator.
    pub fn uses_treatment(&self) -> bool {
        self.terms.iter().any(|t| t.with_treatment)
    }

    pub fn ncols(&self) -> usize {
        self.terms.len()
    }
}

/// Builds the n x k design matrix for `spec` over `ds`.
///
/// When `treatment_override` is given, terms flagged `with_treatment` use the
/// constant override instead of the observed x; this is how Q(1, z) and
/// Q(0, z) predictions are formed from a single outcome spec.
pub fn build_design(
    ds: &Dataset,
    spec: &DesignSpec,
    treatment_override: Option<f64>,
) -> Result<Array2<f64>> {
    spec.validate(ds)?;
    if let Some(t) = treatment_override {
        if t != 0.0 && t != 1.0 {
            return Err(Error::Spec(format!("treatment override must be 0 or 1, got {t}")));
        }
    }
    let n = ds.n();
    let mut design = Array2::ones((n, spec.terms.len()));
    for (j, term) in spec.terms.iter().enumerate() {
        let factor_idx: Vec<(usize, Transform)> = term
            .factors
            .iter()
            .map(|f| (ds.covariate_index(&f.name).expect("validated"), f.transform))
            .collect();
        for i in 0..n {
            let mut v = 1.0;
            for &(ci, tr) in &factor_idx {
                v *= tr.apply(ds.z()[[i, ci]]);
            }
            if term.with_treatment {
                v *= treatment_override.unwrap_or(ds.x()[i]);
            }
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite design value at row {i}, term {j}"
                )));
            }
            design[[i, j]] = v;
        }
    }
    Ok(design)
}

/// Offsets of the (mu, psi, xi) blocks inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockIndex {
    pub q: usize,
    pub r: usize,
}

impl BlockIndex {
    pub fn flat_len(&self) -> usize {
        1 + self.q + self.r
    }

    pub fn psi_range(&self) -> std::ops::Range<usize> {
        1..1 + self.q
    }

    pub fn xi_range(&self) -> std::ops::Range<usize> {
        1 + self.q..1 + self.q + self.r
    }
}

/// Partitioned joint parameter vector theta = (mu, psi, xi).
#[derive(Debug, Clone, PartialEq)]
pub struct JointParams {
    pub mu: f64,
    pub psi: Array1<f64>,
    pub xi: Array1<f64>,
}

impl JointParams {
    pub fn block_index(&self) -> BlockIndex {
        BlockIndex { q: self.psi.len(), r: self.xi.len() }
    }

    pub fn flatten(&self) -> Array1<f64> {
        let mut v = Vec::with_capacity(self.block_index().flat_len());
        v.push(self.mu);
        v.extend(self.psi.iter());
        v.extend(self.xi.iter());
        Array1::from(v)
    }

    pub fn unflatten(flat: &Array1<f64>, blocks: BlockIndex) -> Result<Self> {
        if flat.len() != blocks.flat_len() {
            return Err(Error::Shape(format!(
                "flat vector has length {}, block index implies {}",
                flat.len(),
                blocks.flat_len()
            )));
        }
        Ok(JointParams {
            mu: flat[0],
            psi: flat.slice(ndarray::s![blocks.psi_range()]).to_owned(),
            xi: flat.slice(ndarray::s![blocks.xi_range()]).to_owned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;

    fn toy_dataset() -> Dataset {
        Dataset::new(
            array![1.0, 2.0, 3.0],
            array![1.0, 0.0, 1.0],
            array![[2.0, 0.0], [3.0, 1.0], [0.5, 1.0]],
            vec!["z1".into(), "z2".into()],
        )
        .unwrap()
    }

    fn term(names: &[&str]) -> Term {
        Term {
            factors: names
                .iter()
                .map(|n| Factor { name: n.to_string(), transform: Transform::Identity })
                .collect(),
            with_treatment: false,
        }
    }

    #[test]
    fn intercept_only_design_is_ones() {
        let ds = toy_dataset();
        let spec = DesignSpec::new(vec![Term::intercept()]).unwrap();
        let d = build_design(&ds, &spec, None).unwrap();
        assert_eq!(d.shape(), &[3, 1]);
        assert!(d.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn product_term_column() {
        let ds = Dataset::new(
            array![0.0, 0.0],
            array![1.0, 0.0],
            array![[2.0, 0.0], [3.0, 1.0]],
            vec!["z1".into(), "z2".into()],
        )
        .unwrap();
        let spec = DesignSpec::new(vec![Term::intercept(), term(&["z1", "z2"])]).unwrap();
        let d = build_design(&ds, &spec, None).unwrap();
        assert_eq!(d.column(1).to_vec(), vec![0.0, 3.0]);
    }

    #[test]
    fn sin_transform_column() {
        let ds = Dataset::new(
            array![0.0, 0.0],
            array![1.0, 0.0],
            array![[0.0], [std::f64::consts::FRAC_PI_2]],
            vec!["z1".into()],
        )
        .unwrap();
        let spec = DesignSpec::new(vec![
            Term::intercept(),
            Term {
                factors: vec![Factor { name: "z1".into(), transform: Transform::Sin }],
                with_treatment: false,
            },
        ])
        .unwrap();
        let d = build_design(&ds, &spec, None).unwrap();
        assert_abs_diff_eq!(d[[0, 1]], 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(d[[1, 1]], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn treatment_override_replaces_x() {
        let ds = toy_dataset();
        let spec = DesignSpec::new(vec![
            Term::intercept(),
            Term { factors: vec![], with_treatment: true },
        ])
        .unwrap();
        let observed = build_design(&ds, &spec, None).unwrap();
        assert_eq!(observed.column(1).to_vec(), vec![1.0, 0.0, 1.0]);
        let forced = build_design(&ds, &spec, Some(1.0)).unwrap();
        assert!(forced.column(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unknown_covariate_rejected() {
        let ds = toy_dataset();
        let spec = DesignSpec::new(vec![Term::intercept(), term(&["nope"])]).unwrap();
        assert!(matches!(build_design(&ds, &spec, None), Err(Error::Spec(_))));
    }

    #[test]
    fn missing_intercept_rejected() {
        assert!(matches!(DesignSpec::new(vec![term(&["z1"])]), Err(Error::Spec(_))));
    }

    #[test]
    fn duplicate_terms_rejected() {
        assert!(matches!(
            DesignSpec::new(vec![Term::intercept(), term(&["z1"]), term(&["z1"])]),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn non_binary_treatment_rejected() {
        let err = Dataset::new(
            array![1.0, 2.0],
            array![1.0, 2.0],
            array![[0.0], [0.0]],
            vec!["z1".into()],
        );
        assert!(matches!(err, Err(Error::Data(_))));
    }

    #[test]
    fn flatten_concatenates_blocks() {
        let p = JointParams { mu: 1.0, psi: array![2.0, 3.0], xi: array![4.0] };
        assert_eq!(p.flatten().to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn unflatten_zero_vector() {
        let flat = Array1::zeros(4);
        let p = JointParams::unflatten(&flat, BlockIndex { q: 2, r: 1 }).unwrap();
        assert_eq!(p.mu, 0.0);
        assert!(p.psi.iter().all(|&v| v == 0.0));
        assert!(p.xi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn unflatten_length_mismatch() {
        let flat = Array1::zeros(3);
        assert!(matches!(
            JointParams::unflatten(&flat, BlockIndex { q: 2, r: 1 }),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn design_spec_json_format() {
        let json = r#"[
            {"factors": [], "with_treatment": false},
            {"factors": [{"name": "z1", "transform": "sin"}], "with_treatment": false},
            {"factors": [{"name": "z1"}, {"name": "z2"}], "with_treatment": true}
        ]"#;
        let spec: DesignSpec = serde_json::from_str(json).unwrap();
        assert_eq!(spec.ncols(), 3);
        assert_eq!(spec.terms[1].factors[0].transform, Transform::Sin);
        assert!(spec.terms[2].with_treatment);
    }

    proptest! {
        #[test]
        fn flatten_roundtrip(
            mu in -1e6f64..1e6,
            psi in proptest::collection::vec(-1e6f64..1e6, 0..50),
            xi in proptest::collection::vec(-1e6f64..1e6, 0..50),
        ) {
            let p = JointParams {
                mu,
                psi: Array1::from(psi),
                xi: Array1::from(xi),
            };
            let back = JointParams::unflatten(&p.flatten(), p.block_index()).unwrap();
            prop_assert_eq!(back, p);
        }
    }
}
