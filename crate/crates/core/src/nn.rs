//! Small dense feed-forward networks used as learnable force laws.
//!
//! Architecture: every non-output layer gets a constant bias unit, hidden
//! units apply the softplus activation `g(x) = ln(1 + e^x)`, and the output
//! layer is linear with **no** bias unit of its own (its weight rows still
//! charge the bias unit of the layer below). Weights live in one flat vector
//! ordered layer by layer, within a layer target neuron by target neuron, and
//! within a target row the bias weight comes first followed by the source
//! neurons in order. All evaluation is pure over `&[f64]` slices so callers
//! can embed network weights inside larger parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer widths of a feed-forward network, e.g. `[4, 4, 2]` for a net with a
/// 4-dimensional input, one hidden layer of 4 units, and 2 outputs.
///
/// Invariant: at least two layers, every width at least one. Enforced at
/// construction and across (de)serialization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct NetSpec {
    layer_sizes: Vec<usize>,
}

impl NetSpec {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "a network needs at least an input and an output layer, got {} layer(s)",
                layer_sizes.len()
            )));
        }
        if layer_sizes.iter().any(|&n| n == 0) {
            return Err(Error::InvalidArgument(
                "every layer must have at least one neuron".into(),
            ));
        }
        Ok(NetSpec { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    /// Number of layers including input and output.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    /// Length of the flat weight vector: `Σ (n_l + 1) · n_{l+1}` — each target
    /// layer charges every source neuron plus the source layer's bias unit.
    pub fn param_len(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Offset of weight block `l` (mapping layer `l` to `l + 1`) in the flat
    /// weight vector.
    fn block_offset(&self, l: usize) -> usize {
        self.layer_sizes[..=l]
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }
}

impl TryFrom<Vec<usize>> for NetSpec {
    type Error = Error;
    fn try_from(v: Vec<usize>) -> Result<Self> {
        NetSpec::new(v)
    }
}

impl From<NetSpec> for Vec<usize> {
    fn from(s: NetSpec) -> Vec<usize> {
        s.layer_sizes
    }
}

/// A network together with its flat weight vector, as stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub spec: NetSpec,
    pub weights: Vec<f64>,
}

impl NetParams {
    pub fn new(spec: NetSpec, weights: Vec<f64>) -> Result<Self> {
        check_len("weights", spec.param_len(), weights.len())?;
        Ok(NetParams { spec, weights })
    }
}

/// Numerically stable softplus `ln(1 + e^x)`.
///
/// For large positive `x` the naive form overflows; the identity
/// `softplus(x) = x + ln(1 + e^{-x})` keeps both branches in range and the
/// relative error at machine precision over the whole axis.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic function `1 / (1 + e^{-x})`, the derivative of [`softplus`].
#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        // e^x / (1 + e^x) avoids overflow of e^{-x} for very negative x.
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Intermediate values of one forward pass, reused by the backward passes.
#[derive(Debug, Clone)]
pub struct NetEvalTrace {
    /// `activations[0]` is the input; `activations[l]` the post-activation
    /// output of layer `l`; the last entry is the network output.
    activations: Vec<Vec<f64>>,
    /// `preacts[l]` is the pre-activation of layer `l + 1`.
    preacts: Vec<Vec<f64>>,
}

impl NetEvalTrace {
    /// Network output recorded by the forward pass.
    pub fn output(&self) -> &[f64] {
        self.activations.last().unwrap()
    }

    /// Input the trace was recorded at.
    pub fn input(&self) -> &[f64] {
        &self.activations[0]
    }
}

fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        });
    }
    Ok(())
}

/// Forward pass recording all intermediate activations.
pub fn forward_trace(spec: &NetSpec, weights: &[f64], input: &[f64]) -> Result<NetEvalTrace> {
    check_len("network weights", spec.param_len(), weights.len())?;
    check_len("network input", spec.input_dim(), input.len())?;

    let sizes = spec.layer_sizes();
    let depth = spec.depth();
    let mut activations = Vec::with_capacity(depth);
    let mut preacts = Vec::with_capacity(depth - 1);
    activations.push(input.to_vec());

    let mut offset = 0;
    for l in 0..depth - 1 {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let a = &activations[l];
        let mut z = vec![0.0; n_out];
        for (k, zk) in z.iter_mut().enumerate() {
            let row = &weights[offset + k * (n_in + 1)..offset + (k + 1) * (n_in + 1)];
            let mut acc = row[0]; // bias unit of the source layer
            for j in 0..n_in {
                acc += row[1 + j] * a[j];
            }
            *zk = acc;
        }
        offset += (n_in + 1) * n_out;
        let is_output = l == depth - 2;
        let a_next = if is_output {
            z.clone()
        } else {
            z.iter().copied().map(softplus).collect()
        };
        preacts.push(z);
        activations.push(a_next);
    }

    Ok(NetEvalTrace {
        activations,
        preacts,
    })
}

/// Network output for one input vector.
pub fn forward(spec: &NetSpec, weights: &[f64], input: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_trace(spec, weights, input)?.output().to_vec())
}

/// Exact Jacobian of the network output with respect to its input, row-major
/// `output_dim × input_dim`, evaluated from a stored trace.
pub fn jac_input(spec: &NetSpec, weights: &[f64], trace: &NetEvalTrace) -> Result<Vec<f64>> {
    check_len("network weights", spec.param_len(), weights.len())?;
    check_len("trace depth", spec.depth(), trace.activations.len())?;

    let sizes = spec.layer_sizes();
    let depth = spec.depth();
    let n_out = spec.output_dim();

    // jac holds d(output)/d(z^{l+1}) while walking blocks backwards; start at
    // the output layer where the activation is the identity.
    let mut cols = n_out;
    let mut jac = vec![0.0; n_out * n_out];
    for r in 0..n_out {
        jac[r * n_out + r] = 1.0;
    }

    for l in (0..depth - 1).rev() {
        let (n_in, n_lout) = (sizes[l], sizes[l + 1]);
        debug_assert_eq!(cols, n_lout);
        let offset = spec.block_offset(l);
        // Multiply by the weight matrix without its bias column:
        // next[r][j] = Σ_k jac[r][k] · w[k][1 + j].
        let mut next = vec![0.0; n_out * n_in];
        for r in 0..n_out {
            for k in 0..n_lout {
                let jrk = jac[r * cols + k];
                if jrk == 0.0 {
                    continue;
                }
                let row = &weights[offset + k * (n_in + 1)..offset + (k + 1) * (n_in + 1)];
                for j in 0..n_in {
                    next[r * n_in + j] += jrk * row[1 + j];
                }
            }
        }
        // Chain through the source layer's activation (softplus for hidden
        // layers; the input layer has none).
        if l > 0 {
            let z = &trace.preacts[l - 1];
            for (j, &zj) in z.iter().enumerate() {
                let s = logistic(zj);
                for r in 0..n_out {
                    next[r * n_in + j] *= s;
                }
            }
        }
        jac = next;
        cols = n_in;
    }

    Ok(jac)
}

/// Transposed weight-gradient product: for a cotangent `c` on the output,
/// returns `(∂ output / ∂ weights)ᵀ · c` as a flat vector aligned with the
/// weight layout. Plain backpropagation over the stored trace.
pub fn grad_params_transposed(
    spec: &NetSpec,
    weights: &[f64],
    trace: &NetEvalTrace,
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    check_len("network weights", spec.param_len(), weights.len())?;
    check_len("trace depth", spec.depth(), trace.activations.len())?;
    check_len("cotangent", spec.output_dim(), cotangent.len())?;

    let sizes = spec.layer_sizes();
    let depth = spec.depth();
    let mut grad = vec![0.0; spec.param_len()];

    // delta = d(cᵀ output)/d(z^{l+1}); at the output layer the activation is
    // the identity, so delta starts as the cotangent itself.
    let mut delta = cotangent.to_vec();
    for l in (0..depth - 1).rev() {
        let (n_in, _n_out) = (sizes[l], sizes[l + 1]);
        let offset = spec.block_offset(l);
        let a = &trace.activations[l];
        for (k, &dk) in delta.iter().enumerate() {
            let row = offset + k * (n_in + 1);
            grad[row] = dk; // bias weight sees activation 1
            for j in 0..n_in {
                grad[row + 1 + j] = dk * a[j];
            }
        }
        if l > 0 {
            let z = &trace.preacts[l - 1];
            let mut next = vec![0.0; n_in];
            for (j, nj) in next.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, &dk) in delta.iter().enumerate() {
                    acc += weights[offset + k * (n_in + 1) + 1 + j] * dk;
                }
                *nj = acc * logistic(z[j]);
            }
            delta = next;
        }
    }

    Ok(grad)
}
