//! Fully connected networks `x[Z]` with a linear output layer, flat parameter
//! layout, and the exact Jacobian `D[Z]` of the stacked outputs.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{ensure_finite_vector, Matrix, Vector};

/// Hidden-layer activation. All variants have a Lipschitz continuous derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
    Softplus,
    Identity,
}

fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => a.tanh(),
            Activation::Sigmoid => sigmoid(a),
            // log(1 + e^a) without overflow
            Activation::Softplus => {
                if a > 0.0 {
                    a + (-a).exp().ln_1p()
                } else {
                    a.exp().ln_1p()
                }
            }
            Activation::Identity => a,
        }
    }

    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = sigmoid(a);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(a),
            Activation::Identity => 1.0,
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "tanh" => Ok(Activation::Tanh),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Architecture: widths `M₀ = M, M₁, …, M_L, M_{L+1} = Q`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    layer_widths: Vec<usize>,
    #[serde(default)]
    activation: Activation,
}

/// Position of one affine layer inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerLayout {
    pub rows: usize,
    pub cols: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl LayerLayout {
    fn end(&self) -> usize {
        self.bias_offset + self.rows
    }
}

/// Weights and bias of one affine layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vector,
}

impl NetworkSpec {
    pub fn new(layer_widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = NetworkSpec {
            layer_widths,
            activation,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 2 {
            return Err(Error::InvalidShape(
                "a network needs at least input and output widths".into(),
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::InvalidShape("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.layer_widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_widths.last().expect("validated")
    }

    /// Number of hidden layers `L`.
    pub fn hidden_layers(&self) -> usize {
        self.layer_widths.len() - 2
    }

    /// `K = Σ (M_ℓ·M_{ℓ-1} + M_ℓ)`.
    pub fn param_count(&self) -> usize {
        self.layer_widths
            .windows(2)
            .map(|w| w[1] * w[0] + w[1])
            .sum()
    }

    /// Layout `W₁, b₁, …, W_{L+1}, b_{L+1}`, each `W` row-major.
    pub fn layout(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.layer_widths
            .windows(2)
            .map(|w| {
                let l = LayerLayout {
                    rows: w[1],
                    cols: w[0],
                    weight_offset: offset,
                    bias_offset: offset + w[0] * w[1],
                };
                offset = l.end();
                l
            })
            .collect()
    }

    fn check_params(&self, z: &Vector) -> Result<()> {
        let k = self.param_count();
        if z.len() != k {
            return Err(Error::shape("parameter vector", k, z.len()));
        }
        ensure_finite_vector(z, "parameter vector")
    }

    pub fn unflatten(&self, z: &Vector) -> Result<Vec<Layer>> {
        self.check_params(z)?;
        Ok(self
            .layout()
            .iter()
            .map(|l| Layer {
                weight: Matrix::from_row_slice(
                    l.rows,
                    l.cols,
                    &z.as_slice()[l.weight_offset..l.bias_offset],
                ),
                bias: Vector::from_column_slice(&z.as_slice()[l.bias_offset..l.end()]),
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[Layer]) -> Result<Vector> {
        let layout = self.layout();
        if layers.len() != layout.len() {
            return Err(Error::shape("layer count", layout.len(), layers.len()));
        }
        let mut z = Vector::zeros(self.param_count());
        for (l, layer) in layout.iter().zip(layers) {
            if layer.weight.shape() != (l.rows, l.cols) {
                return Err(Error::shape(
                    "weight matrix entries",
                    l.rows * l.cols,
                    layer.weight.len(),
                ));
            }
            if layer.bias.len() != l.rows {
                return Err(Error::shape("bias vector", l.rows, layer.bias.len()));
            }
            for r in 0..l.rows {
                for c in 0..l.cols {
                    z[l.weight_offset + r * l.cols + c] = layer.weight[(r, c)];
                }
                z[l.bias_offset + r] = layer.bias[r];
            }
        }
        Ok(z)
    }

    /// I.i.d. uniform entries on `[-a, a]`, `a = 1/√M_{ℓ-1}` per layer.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vector {
        let mut z = Vector::zeros(self.param_count());
        for l in self.layout() {
            let a = 1.0 / (l.cols as f64).sqrt();
            for k in l.weight_offset..l.end() {
                z[k] = rng.gen_range(-a..=a);
            }
        }
        z
    }
}

/// Inputs `x_j⁽⁰⁾`, reference outputs `y_i` and the label map `ω` (0-based).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSet {
    inputs: Vec<Vec<f64>>,
    outputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
}

impl TrainingSet {
    pub fn new(inputs: Vec<Vec<f64>>, outputs: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        let set = TrainingSet {
            inputs,
            outputs,
            labels,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let n = self.inputs.len();
        if n == 0 {
            return Err(Error::InvalidShape("training set is empty".into()));
        }
        if self.labels.len() != n {
            return Err(Error::shape("label map", n, self.labels.len()));
        }
        let m = self.inputs[0].len();
        if m == 0 || self.inputs.iter().any(|x| x.len() != m) {
            return Err(Error::InvalidShape(
                "inputs must share a positive dimension".into(),
            ));
        }
        let q = self.outputs.len();
        if q == 0 || self.outputs.iter().any(|y| y.len() != q) {
            return Err(Error::InvalidShape(format!(
                "expected {q} reference outputs of dimension {q}"
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&w| w >= q) {
            return Err(Error::InvalidShape(format!(
                "label {} outside 1..={q}",
                bad + 1
            )));
        }
        for (i, a) in self.outputs.iter().enumerate() {
            if self.outputs[..i].contains(a) {
                return Err(Error::InvalidShape(format!(
                    "reference output {} duplicates an earlier one",
                    i + 1
                )));
            }
        }
        let finite = |v: &Vec<f64>| v.iter().all(|x| x.is_finite());
        if !self.inputs.iter().all(finite) || !self.outputs.iter().all(finite) {
            return Err(Error::NonFinite("training set"));
        }
        Ok(())
    }

    /// Number of samples `N`.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs[0].len()
    }

    /// `Q`, both the number of reference outputs and their dimension.
    pub fn output_dim(&self) -> usize {
        self.outputs.len()
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// `y_ω = (y_{ω(1)}, …, y_{ω(N)})ᵀ ∈ R^{QN}`.
    pub fn target(&self) -> Vector {
        Vector::from_iterator(
            self.len() * self.output_dim(),
            self.labels
                .iter()
                .flat_map(|&w| self.outputs[w].iter().copied()),
        )
    }

    /// `N_i` for each output class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.output_dim()];
        for &w in &self.labels {
            counts[w] += 1;
        }
        counts
    }

    pub fn check_against(&self, spec: &NetworkSpec) -> Result<()> {
        if self.input_dim() != spec.input_dim() {
            return Err(Error::shape(
                "input dimension",
                spec.input_dim(),
                self.input_dim(),
            ));
        }
        if self.output_dim() != spec.output_dim() {
            return Err(Error::shape(
                "output dimension",
                spec.output_dim(),
                self.output_dim(),
            ));
        }
        Ok(())
    }

    /// Reads `j,x_0..x_{M-1},omega` and `i,y_0..y_{Q-1}` CSV files (1-based indices).
    pub fn from_csv(inputs: &Path, outputs: &Path) -> Result<Self> {
        let parse_err = |path: &Path, message: String| Error::Parse {
            path: path.to_path_buf(),
            message,
        };
        let mut xs = Vec::new();
        let mut labels = Vec::new();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(inputs)?;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(parse_err(
                    inputs,
                    format!("row {}: too few columns", row + 1),
                ));
            }
            let x = rec
                .iter()
                .skip(1)
                .take(rec.len() - 2)
                .map(str::parse)
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| parse_err(inputs, format!("row {}: {e}", row + 1)))?;
            let omega: usize = rec[rec.len() - 1]
                .parse()
                .map_err(|e| parse_err(inputs, format!("row {}: omega: {e}", row + 1)))?;
            if omega == 0 {
                return Err(parse_err(
                    inputs,
                    format!("row {}: omega is 1-based", row + 1),
                ));
            }
            xs.push(x);
            labels.push(omega - 1);
        }
        let mut ys = Vec::new();
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_path(outputs)?;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let y = rec
                .iter()
                .skip(1)
                .map(str::parse)
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| parse_err(outputs, format!("row {}: {e}", row + 1)))?;
            ys.push(y);
        }
        TrainingSet::new(xs, ys, labels)
    }

    pub fn write_csv(&self, inputs: &Path, outputs: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(inputs)?;
        let mut header = vec!["j".to_string()];
        header.extend((0..self.input_dim()).map(|k| format!("x_{k}")));
        header.push("omega".into());
        w.write_record(&header)?;
        for (j, (x, &omega)) in self.inputs.iter().zip(&self.labels).enumerate() {
            let mut rec = vec![(j + 1).to_string()];
            rec.extend(x.iter().map(|v| format!("{v:e}")));
            rec.push((omega + 1).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(outputs)?;
        let mut header = vec!["i".to_string()];
        header.extend((0..self.output_dim()).map(|k| format!("y_{k}")));
        w.write_record(&header)?;
        for (i, y) in self.outputs.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(y.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Per-sample pre-activations and activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    /// `W_ℓ x⁽ℓ⁻¹⁾ + b_ℓ` for `ℓ = 1..=L+1`.
    pub pre_activations: Vec<Vector>,
    /// `x⁽ℓ⁾` for `ℓ = 0..=L+1`; the last entry is `x_j[Z]`.
    pub activations: Vec<Vector>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub samples: Vec<SampleTrace>,
}

fn check_shapes(spec: &NetworkSpec, z: &Vector, data: &TrainingSet) -> Result<Vec<Layer>> {
    spec.validate()?;
    data.check_against(spec)?;
    spec.unflatten(z)
}

fn forward_layers(
    spec: &NetworkSpec,
    layers: &[Layer],
    data: &TrainingSet,
) -> Result<(Vector, ForwardTrace)> {
    let q = spec.output_dim();
    let last = layers.len() - 1;
    let mut x = Vector::zeros(q * data.len());
    let mut samples = Vec::with_capacity(data.len());
    for (j, input) in data.inputs().iter().enumerate() {
        let mut activations = vec![Vector::from_column_slice(input)];
        let mut pre_activations = Vec::with_capacity(layers.len());
        for (l, layer) in layers.iter().enumerate() {
            let pre = &layer.weight * &activations[l] + &layer.bias;
            let act = if l == last {
                pre.clone()
            } else {
                pre.map(|a| spec.activation().apply(a))
            };
            pre_activations.push(pre);
            activations.push(act);
        }
        let out = activations.last().expect("at least one layer");
        ensure_finite_vector(out, "network output")?;
        x.rows_mut(j * q, q).copy_from(out);
        samples.push(SampleTrace {
            pre_activations,
            activations,
        });
    }
    Ok((x, ForwardTrace { samples }))
}

/// Stacked outputs `x[Z] ∈ R^{QN}` in sample order, and the per-layer trace.
pub fn forward(
    spec: &NetworkSpec,
    z: &Vector,
    data: &TrainingSet,
) -> Result<(Vector, ForwardTrace)> {
    let layers = check_shapes(spec, z, data)?;
    forward_layers(spec, &layers, data)
}

/// Outputs and exact Jacobian from a single forward pass.
#[derive(Debug, Clone)]
pub struct NetworkEval {
    pub x: Vector,
    pub jacobian: Matrix,
}

/// `x[Z]` together with `D[Z] ∈ R^{QN×K}`.
///
/// The Jacobian is built by reverse accumulation: for each sample the `Q`
/// output sensitivities are propagated backwards together as the columns of
/// one `M_ℓ × Q` matrix.
pub fn evaluate(spec: &NetworkSpec, z: &Vector, data: &TrainingSet) -> Result<NetworkEval> {
    let layers = check_shapes(spec, z, data)?;
    let (x, trace) = forward_layers(spec, &layers, data)?;
    let layout = spec.layout();
    let q = spec.output_dim();
    let mut jac = Matrix::zeros(q * data.len(), spec.param_count());

    for (j, sample) in trace.samples.iter().enumerate() {
        let row0 = j * q;
        let mut delta = Matrix::identity(q, q);
        for l in (0..layers.len()).rev() {
            let lay = &layout[l];
            let input = &sample.activations[l];
            for out in 0..q {
                for r in 0..lay.rows {
                    let d = delta[(r, out)];
                    let base = lay.weight_offset + r * lay.cols;
                    for c in 0..lay.cols {
                        jac[(row0 + out, base + c)] = d * input[c];
                    }
                    jac[(row0 + out, lay.bias_offset + r)] = d;
                }
            }
            if l > 0 {
                let mut back = layers[l].weight.tr_mul(&delta);
                let pre = &sample.pre_activations[l - 1];
                for (mut row, &a) in back.row_iter_mut().zip(pre.iter()) {
                    row *= spec.activation().derivative(a);
                }
                delta = back;
            }
        }
    }
    Ok(NetworkEval { x, jacobian: jac })
}

/// `D[Z] = [∂x_j/∂Z_k]`, `Q` rows per sample.
pub fn jacobian(spec: &NetworkSpec, z: &Vector, data: &TrainingSet) -> Result<Matrix> {
    Ok(evaluate(spec, z, data)?.jacobian)
}

fn check_pair(x: &Vector, target: &Vector, n: usize) -> Result<()> {
    if x.len() != target.len() {
        return Err(Error::shape("output vector", target.len(), x.len()));
    }
    if n == 0 {
        return Err(Error::NonPositive("sample count"));
    }
    Ok(())
}

/// `C = |x - y_ω|² / (2N)`.
pub fn cost(x: &Vector, target: &Vector, n: usize) -> Result<f64> {
    check_pair(x, target, n)?;
    Ok((x - target).norm_squared() / (2.0 * n as f64))
}

/// `∇ₓC = (x - y_ω) / N`.
pub fn cost_gradient_x(x: &Vector, target: &Vector, n: usize) -> Result<Vector> {
    check_pair(x, target, n)?;
    Ok((x - target) / n as f64)
}

/// `∇_Z C = Dᵀ ∇ₓC`.
pub fn cost_gradient_z(spec: &NetworkSpec, z: &Vector, data: &TrainingSet) -> Result<Vector> {
    let eval = evaluate(spec, z, data)?;
    let g = cost_gradient_x(&eval.x, &data.target(), data.len())?;
    Ok(eval.jacobian.tr_mul(&g))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn scalar_net(hidden: &[usize]) -> NetworkSpec {
        let mut widths = vec![1];
        widths.extend_from_slice(hidden);
        widths.push(1);
        NetworkSpec::new(widths, Activation::Tanh).unwrap()
    }

    fn one_class(inputs: &[f64], y: f64) -> TrainingSet {
        TrainingSet::new(
            inputs.iter().map(|&v| vec![v]).collect(),
            vec![vec![y]],
            vec![0; inputs.len()],
        )
        .unwrap()
    }

    #[test]
    fn param_count_and_layout() {
        let spec = NetworkSpec::new(vec![2, 8, 8, 2], Activation::Tanh).unwrap();
        assert_eq!(spec.param_count(), 114);
        assert_eq!(spec.hidden_layers(), 2);
        let layout = spec.layout();
        assert_eq!(layout[0].weight_offset, 0);
        assert_eq!(layout[0].bias_offset, 16);
        assert_eq!(layout[1].weight_offset, 24);
        assert_eq!(layout[2].bias_offset + 2, 114);
        assert!(NetworkSpec::new(vec![3], Activation::Tanh).is_err());
        assert!(NetworkSpec::new(vec![3, 0, 1], Activation::Tanh).is_err());
    }

    #[test]
    fn activations_are_overflow_safe() {
        let sp = Activation::Softplus;
        assert_eq!(sp.apply(1000.0), 1000.0);
        assert!(sp.apply(-1000.0) >= 0.0);
        assert_relative_eq!(sp.apply(0.0), 2f64.ln());
        assert_eq!(Activation::Sigmoid.apply(-1000.0), 0.0);
        assert_eq!(Activation::Sigmoid.derivative(1000.0), 0.0);
        for act in [Activation::Tanh, Activation::Sigmoid, Activation::Softplus] {
            for a in [-3.0, -0.2, 0.0, 0.7, 2.5] {
                let h = 1e-6;
                let fd = (act.apply(a + h) - act.apply(a - h)) / (2.0 * h);
                assert_relative_eq!(act.derivative(a), fd, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn single_affine_identity() {
        let spec = NetworkSpec::new(vec![3, 3], Activation::Tanh).unwrap();
        let z = spec
            .flatten(&[Layer {
                weight: Matrix::identity(3, 3),
                bias: Vector::zeros(3),
            }])
            .unwrap();
        let data = TrainingSet::new(
            vec![vec![0.5, -1.0, 2.0]],
            vec![
                vec![1.0, 0.0, 0.0],
                vec![0.0, 1.0, 0.0],
                vec![0.0, 0.0, 1.0],
            ],
            vec![1],
        )
        .unwrap();
        let (x, trace) = forward(&spec, &z, &data).unwrap();
        assert_eq!(x.as_slice(), &[0.5, -1.0, 2.0]);
        assert_eq!(trace.samples[0].activations.len(), 2);
    }

    #[test]
    fn scalar_affine_forward_and_jacobian() {
        let spec = scalar_net(&[]);
        let data = one_class(&[3.0], 0.0);
        let z = Vector::from_vec(vec![2.0, 1.0]);
        let (x, _) = forward(&spec, &z, &data).unwrap();
        assert_eq!(x[0], 7.0);
        let d = jacobian(&spec, &z, &data).unwrap();
        assert_eq!(d, Matrix::from_row_slice(1, 2, &[3.0, 1.0]));
        let g = cost_gradient_z(&spec, &z, &data).unwrap();
        assert_eq!(g.as_slice(), &[21.0, 7.0]);
    }

    #[test]
    fn two_sample_jacobian() {
        let spec = scalar_net(&[]);
        let data = one_class(&[1.0, 2.0], 0.0);
        let d = jacobian(&spec, &Vector::from_vec(vec![0.3, -0.1]), &data).unwrap();
        assert_eq!(d, Matrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 1.0]));
    }

    #[test]
    fn identity_hidden_layer_composes() {
        let spec = NetworkSpec::new(vec![2, 2, 2], Activation::Identity).unwrap();
        let eye = || Layer {
            weight: Matrix::identity(2, 2),
            bias: Vector::zeros(2),
        };
        let z = spec.flatten(&[eye(), eye()]).unwrap();
        let data = TrainingSet::new(
            vec![vec![0.25, -4.0], vec![1.0, 3.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 1],
        )
        .unwrap();
        let (x, _) = forward(&spec, &z, &data).unwrap();
        assert_eq!(x.as_slice(), &[0.25, -4.0, 1.0, 3.0]);
    }

    #[test]
    fn cost_examples() {
        let v = |s: &[f64]| Vector::from_column_slice(s);
        assert_eq!(cost(&v(&[1.0, 2.0]), &v(&[1.0, 2.0]), 1).unwrap(), 0.0);
        assert_eq!(cost(&v(&[3.0]), &v(&[1.0]), 1).unwrap(), 2.0);
        assert_eq!(cost(&v(&[1.0, 1.0]), &v(&[0.0, 0.0]), 2).unwrap(), 0.5);
        assert!(cost(&v(&[1.0]), &v(&[1.0, 2.0]), 1).is_err());
        assert_eq!(
            cost_gradient_x(&v(&[2.0, 0.0]), &v(&[0.0, 0.0]), 2)
                .unwrap()
                .as_slice(),
            &[1.0, 0.0]
        );
        assert_eq!(
            cost_gradient_x(&v(&[1.0, 2.0]), &v(&[1.0, 2.0]), 3)
                .unwrap()
                .as_slice(),
            &[0.0, 0.0]
        );
    }

    #[test]
    fn gradient_vanishes_at_global_minimum() {
        let spec = scalar_net(&[]);
        let data = one_class(&[3.0], 7.0);
        let g = cost_gradient_z(&spec, &Vector::from_vec(vec![2.0, 1.0]), &data).unwrap();
        assert_eq!(g.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn training_set_validation() {
        assert!(TrainingSet::new(vec![], vec![vec![1.0]], vec![]).is_err());
        assert!(TrainingSet::new(vec![vec![1.0]], vec![vec![1.0]], vec![1]).is_err());
        assert!(TrainingSet::new(
            vec![vec![1.0]],
            vec![vec![1.0, 0.0], vec![1.0, 0.0]],
            vec![0]
        )
        .is_err());
        let set = TrainingSet::new(
            vec![vec![0.0], vec![1.0], vec![2.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![0, 1, 1],
        )
        .unwrap();
        assert_eq!(set.class_counts(), vec![1, 2]);
        assert_eq!(set.target().as_slice(), &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let set = TrainingSet::new(
            vec![vec![0.1, -2.0], vec![1.5, 3.25], vec![-0.3, 0.0]],
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            vec![1, 0, 1],
        )
        .unwrap();
        let (a, b) = (dir.path().join("x.csv"), dir.path().join("y.csv"));
        set.write_csv(&a, &b).unwrap();
        let header = std::fs::read_to_string(&a).unwrap();
        assert!(header.starts_with("j,x_0,x_1,omega\n1,"));
        assert_eq!(TrainingSet::from_csv(&a, &b).unwrap(), set);
    }

    fn random_case() -> impl Strategy<Value = (NetworkSpec, Vector, TrainingSet)> {
        (
            proptest::collection::vec(1usize..=5, 2..=5),
            prop_oneof![
                Just(Activation::Tanh),
                Just(Activation::Sigmoid),
                Just(Activation::Softplus),
                Just(Activation::Identity)
            ],
            1usize..4,
            any::<u64>(),
        )
            .prop_map(|(widths, act, n, seed)| {
                let spec = NetworkSpec::new(widths, act).unwrap();
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
                let z = spec.init_params(&mut rng);
                let (m, q) = (spec.input_dim(), spec.output_dim());
                let inputs = (0..n)
                    .map(|_| (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect())
                    .collect();
                let outputs = (0..q)
                    .map(|i| (0..q).map(|k| if k == i { 1.0 } else { 0.0 }).collect())
                    .collect();
                let labels = (0..n).map(|j| j % q).collect();
                (spec, z, TrainingSet::new(inputs, outputs, labels).unwrap())
            })
    }

    proptest! {
        #[test]
        fn flatten_round_trip((spec, z, _data) in random_case()) {
            let layers = spec.unflatten(&z).unwrap();
            prop_assert_eq!(spec.flatten(&layers).unwrap(), z);
        }

        #[test]
        fn chain_rule_consistency((spec, z, data) in random_case()) {
            let eval = evaluate(&spec, &z, &data).unwrap();
            let gx = cost_gradient_x(&eval.x, &data.target(), data.len()).unwrap();
            let gz = cost_gradient_z(&spec, &z, &data).unwrap();
            let diff = (&gz - eval.jacobian.tr_mul(&gx)).norm();
            prop_assert!(diff <= 1e-12 * (1.0 + gz.norm()));
            let c = cost(&eval.x, &data.target(), data.len()).unwrap();
            prop_assert!((c - data.len() as f64 / 2.0 * gx.norm_squared()).abs() <= 1e-14 * (1.0 + c));
        }

        #[test]
        fn jacobian_matches_central_differences((spec, z, data) in random_case()) {
            let d = jacobian(&spec, &z, &data).unwrap();
            for k in 0..z.len() {
                let h = 1e-6 * (1.0 + z[k].abs());
                let mut zp = z.clone();
                zp[k] += h;
                let mut zm = z.clone();
                zm[k] -= h;
                let fd = (forward(&spec, &zp, &data).unwrap().0 - forward(&spec, &zm, &data).unwrap().0) / (2.0 * h);
                for r in 0..d.nrows() {
                    let err = (d[(r, k)] - fd[r]).abs() / (1.0 + d[(r, k)].abs());
                    prop_assert!(err <= 1e-5, "entry ({}, {}): {} vs {}", r, k, d[(r, k)], fd[r]);
                }
            }
        }

        #[test]
        fn identity_network_is_affine_composition((spec, z, data) in random_case()) {
            let spec = NetworkSpec::new(spec.layer_widths().to_vec(), Activation::Identity).unwrap();
            let layers = spec.unflatten(&z).unwrap();
            let mut w = Matrix::identity(spec.input_dim(), spec.input_dim());
            let mut b = Vector::zeros(spec.input_dim());
            for layer in &layers {
                b = &layer.weight * b + &layer.bias;
                w = &layer.weight * w;
            }
            let (x, _) = forward(&spec, &z, &data).unwrap();
            let q = spec.output_dim();
            for (j, input) in data.inputs().iter().enumerate() {
                let expected = &w * Vector::from_column_slice(input) + &b;
                let got = x.rows(j * q, q);
                prop_assert!((expected - got).amax() <= 1e-12);
            }
        }
    }
}
