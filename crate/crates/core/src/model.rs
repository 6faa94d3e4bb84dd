//! Adapter-augmented models: frozen pretrained weights plus trainable
//! low-rank adapters and a per-client classifier.
//!
//! Every backbone layer holds a frozen dense matrix `w_pre`, a frozen
//! down-projection `a_fixed` and a trainable up-projection `b_train`. The
//! effective layer weight is always `w_pre + a_fixed * b_train`, computed on
//! demand and never cached, so frozen tensors stay bit-identical across any
//! number of training steps.

use ndarray::{Array2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Scalar;

/// Elementwise nonlinearity applied after a backbone layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply<F: Scalar>(self, z: &Array2<F>) -> Array2<F> {
        match self {
            Activation::Relu => z.mapv(|v| if v > F::zero() { v } else { F::zero() }),
            Activation::Identity => z.clone(),
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    fn derivative<F: Scalar>(self, z: &Array2<F>) -> Array2<F> {
        match self {
            Activation::Relu => z.mapv(|v| if v > F::zero() { F::one() } else { F::zero() }),
            Activation::Identity => Array2::ones(z.dim()),
        }
    }
}

/// One backbone layer: frozen dense weight plus a low-rank adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer<F> {
    w_pre: Array2<F>,   // r_in x r_out, frozen
    a_fixed: Array2<F>, // r_in x rank, frozen
    b_train: Array2<F>, // rank x r_out, trainable
    pub activation: Activation,
}

impl<F: Scalar> AdapterLayer<F> {
    pub fn new(
        w_pre: Array2<F>,
        a_fixed: Array2<F>,
        b_train: Array2<F>,
        activation: Activation,
    ) -> Result<Self> {
        let (r_in, r_out) = w_pre.dim();
        let rank = a_fixed.ncols();
        if rank == 0 || rank > r_in.min(r_out) {
            return Err(Error::InvalidRank {
                rank,
                rows: r_in,
                cols: r_out,
            });
        }
        if a_fixed.nrows() != r_in || b_train.dim() != (rank, r_out) {
            return Err(Error::LayoutMismatch(format!(
                "adapter factors {}x{} / {}x{} incompatible with {}x{} layer",
                a_fixed.nrows(),
                a_fixed.ncols(),
                b_train.nrows(),
                b_train.ncols(),
                r_in,
                r_out
            )));
        }
        Ok(Self {
            w_pre,
            a_fixed,
            b_train,
            activation,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w_pre.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w_pre.ncols()
    }

    pub fn rank(&self) -> usize {
        self.a_fixed.ncols()
    }

    pub fn w_pre(&self) -> &Array2<F> {
        &self.w_pre
    }

    pub fn a_fixed(&self) -> &Array2<F> {
        &self.a_fixed
    }

    pub fn b_train(&self) -> &Array2<F> {
        &self.b_train
    }

    pub fn b_train_mut(&mut self) -> &mut Array2<F> {
        &mut self.b_train
    }

    /// `w_pre + a_fixed * b_train`, recomputed on every call.
    pub fn effective_weight(&self) -> Array2<F> {
        &self.w_pre + &self.a_fixed.dot(&self.b_train)
    }
}

/// Shape descriptor for one matrix inside a [`FlatVector`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub layer: usize,
    pub rows: usize,
    pub cols: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Row-major concatenation of trainable matrices, with its layout recorded.
///
/// This is the only client state that ever crosses the client/server
/// boundary in phase 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatVector<F> {
    values: Vec<F>,
    layout: Vec<LayoutEntry>,
}

impl<F: Scalar> FlatVector<F> {
    pub fn new(values: Vec<F>, layout: Vec<LayoutEntry>) -> Result<Self> {
        let expected: usize = layout.iter().map(LayoutEntry::len).sum();
        if values.len() != expected {
            return Err(Error::LayoutMismatch(format!(
                "{} values for layout of total size {expected}",
                values.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            values: vec![F::zero(); self.values.len()],
            layout: self.layout.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn layout(&self) -> &[LayoutEntry] {
        &self.layout
    }

    pub fn layout_matches(&self, other: &Self) -> bool {
        self.layout == other.layout
    }

    fn check_layout(&self, other: &Self, what: &str) -> Result<()> {
        if !self.layout_matches(other) {
            return Err(Error::LayoutMismatch(format!("{what}: layouts differ")));
        }
        Ok(())
    }

    /// `self + s * other`, in place.
    pub fn add_scaled(&mut self, other: &Self, s: F) -> Result<()> {
        self.check_layout(other, "add_scaled")?;
        for (a, &b) in self.values.iter_mut().zip(other.values.iter()) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: F) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn squared_distance(&self, other: &Self) -> Result<F> {
        self.check_layout(other, "squared_distance")?;
        let mut acc = F::zero();
        for (&a, &b) in self.values.iter().zip(other.values.iter()) {
            let d = a - b;
            acc += d * d;
        }
        Ok(acc)
    }

    pub fn norm(&self) -> F {
        self.values.iter().map(|&v| v * v).sum::<F>().sqrt()
    }
}

/// A client's model: fixed layer stack, trainable adapters, private classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel<F> {
    pub client_id: usize,
    layers: Vec<AdapterLayer<F>>,
    classifier: Array2<F>, // r_out x C, trainable
    num_classes: usize,
}

impl<F: Scalar> ClientModel<F> {
    pub fn new(
        client_id: usize,
        layers: Vec<AdapterLayer<F>>,
        classifier: Array2<F>,
        num_classes: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::LayoutMismatch("model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    layer: i + 1,
                    expected: pair[0].output_dim(),
                    got: pair[1].input_dim(),
                });
            }
        }
        let last_out = layers.last().expect("non-empty").output_dim();
        if classifier.nrows() != last_out || classifier.ncols() != num_classes || num_classes < 2 {
            return Err(Error::LayoutMismatch(format!(
                "classifier {}x{} incompatible with backbone output {last_out} / {num_classes} classes",
                classifier.nrows(),
                classifier.ncols()
            )));
        }
        Ok(Self {
            client_id,
            layers,
            classifier,
            num_classes,
        })
    }

    /// Random model for tests and pretraining scaffolds: `w_pre` Gaussian,
    /// `a_fixed` Gaussian with variance `1/r_in`, `b_train` zero.
    pub fn random<R: Rng>(
        client_id: usize,
        dims: &[usize],
        rank: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let layers = random_layers(dims, rank, rng)?;
        let r_out = dims[dims.len() - 1];
        let scale = (1.0 / r_out as f64).sqrt();
        let classifier = gaussian_matrix(r_out, num_classes, scale, rng);
        Self::new(client_id, layers, classifier, num_classes)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    /// Layer widths `[d_0, d_1, ..., d_L]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layers.iter().map(AdapterLayer::input_dim).collect();
        dims.push(self.layers.last().expect("non-empty").output_dim());
        dims
    }

    pub fn rank(&self) -> usize {
        self.layers[0].rank()
    }

    pub fn layers(&self) -> &[AdapterLayer<F>] {
        &self.layers
    }

    pub fn classifier(&self) -> &Array2<F> {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Array2<F> {
        &mut self.classifier
    }

    /// Clone carrying a different client id.
    pub fn for_client(&self, client_id: usize) -> Self {
        let mut m = self.clone();
        m.client_id = client_id;
        m
    }

    fn effective_weights(&self) -> Vec<Array2<F>> {
        self.layers.iter().map(AdapterLayer::effective_weight).collect()
    }

    fn activations(&self) -> Vec<Activation> {
        self.layers.iter().map(|l| l.activation).collect()
    }

    /// Raw logits for a batch (rows are samples).
    pub fn forward(&self, x: &Array2<F>) -> Result<Array2<F>> {
        let trace = forward_pass(
            &self.effective_weights(),
            &self.activations(),
            &self.classifier,
            x,
        )?;
        Ok(trace.logits)
    }

    /// Loss value and gradients restricted to trainable parameters.
    ///
    /// `loss_fn` maps logits to `(loss, dloss/dlogits)`. Frozen tensors get
    /// no gradient entries; the input gradient is returned for attackers.
    pub fn gradients<L>(&self, x: &Array2<F>, loss_fn: L) -> Result<BackwardOutput<F>>
    where
        L: FnOnce(&Array2<F>) -> Result<(F, Array2<F>)>,
    {
        let weights = self.effective_weights();
        let acts = self.activations();
        let trace = forward_pass(&weights, &acts, &self.classifier, x)?;
        let (loss, dlogits) = loss_fn(&trace.logits)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                index: first_non_finite_row(&trace.logits).unwrap_or(0),
            });
        }
        let (d_weights, d_classifier, d_input) =
            backward_pass(&trace, &weights, &acts, &self.classifier, &dlogits);
        let b_train = self
            .layers
            .iter()
            .zip(d_weights.iter())
            .map(|(layer, dw)| layer.a_fixed.t().dot(dw))
            .collect();
        Ok(BackwardOutput {
            loss,
            grads: Gradients {
                b_train,
                classifier: d_classifier,
            },
            input_grad: d_input,
        })
    }

    /// SGD step on adapters and classifier only.
    pub fn sgd_step(&mut self, grads: &Gradients<F>, lr: F) {
        for (layer, g) in self.layers.iter_mut().zip(grads.b_train.iter()) {
            layer.b_train.zip_mut_with(g, |b, &d| *b -= lr * d);
        }
        self.classifier.zip_mut_with(&grads.classifier, |c, &d| *c -= lr * d);
    }

    /// Row-major concatenation of all `b_train` matrices in layer order.
    pub fn flatten_adapters(&self) -> FlatVector<F> {
        let mut values = Vec::new();
        let mut layout = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layout.push(LayoutEntry {
                layer: i,
                rows: layer.b_train.nrows(),
                cols: layer.b_train.ncols(),
            });
            values.extend(layer.b_train.iter().copied());
        }
        FlatVector { values, layout }
    }

    /// Overwrites `b_train` matrices from a flat vector; frozen parts untouched.
    pub fn set_adapters(&mut self, v: &FlatVector<F>) -> Result<()> {
        let expected = self.flatten_adapters();
        if v.layout != expected.layout {
            return Err(Error::LayoutMismatch(
                "flat vector does not match this model's adapter shapes".into(),
            ));
        }
        let mut offset = 0;
        for layer in &mut self.layers {
            for b in layer.b_train.iter_mut() {
                *b = v.values[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Adapters plus classifier in one vector (whole-model sharing baseline).
    /// The classifier entry uses layer index `num_layers`.
    pub fn flatten_all(&self) -> FlatVector<F> {
        let mut flat = self.flatten_adapters();
        flat.layout.push(LayoutEntry {
            layer: self.layers.len(),
            rows: self.classifier.nrows(),
            cols: self.classifier.ncols(),
        });
        flat.values.extend(self.classifier.iter().copied());
        flat
    }

    /// Inverse of [`Self::flatten_all`].
    pub fn set_all(&mut self, v: &FlatVector<F>) -> Result<()> {
        let expected = self.flatten_all();
        if v.layout != expected.layout {
            return Err(Error::LayoutMismatch(
                "flat vector does not match this model's adapter+classifier shapes".into(),
            ));
        }
        let adapter_len = v.len() - self.classifier.len();
        let mut offset = 0;
        for layer in &mut self.layers {
            for b in layer.b_train.iter_mut() {
                *b = v.values[offset];
                offset += 1;
            }
        }
        debug_assert_eq!(offset, adapter_len);
        for c in self.classifier.iter_mut() {
            *c = v.values[offset];
            offset += 1;
        }
        Ok(())
    }

    /// Collapses each layer to a single dense matrix; everything trainable.
    pub fn fuse(&self) -> FusedModel<F> {
        FusedModel {
            client_id: self.client_id,
            layers: self
                .layers
                .iter()
                .map(|l| FusedLayer {
                    weight: l.effective_weight(),
                    activation: l.activation,
                })
                .collect(),
            classifier: self.classifier.clone(),
            num_classes: self.num_classes,
        }
    }

    /// Number of trainable scalars (adapter-B entries then classifier).
    pub fn num_trainable(&self) -> usize {
        self.layers.iter().map(|l| l.b_train.len()).sum::<usize>() + self.classifier.len()
    }

    /// Reads the `i`-th trainable scalar in flatten order.
    pub fn trainable(&self, mut i: usize) -> F {
        for layer in &self.layers {
            if i < layer.b_train.len() {
                return *layer.b_train.iter().nth(i).expect("index in range");
            }
            i -= layer.b_train.len();
        }
        *self.classifier.iter().nth(i).expect("index in range")
    }

    /// Writes the `i`-th trainable scalar in flatten order.
    pub fn set_trainable(&mut self, mut i: usize, v: F) {
        for layer in &mut self.layers {
            if i < layer.b_train.len() {
                *layer.b_train.iter_mut().nth(i).expect("index in range") = v;
                return;
            }
            i -= layer.b_train.len();
        }
        *self.classifier.iter_mut().nth(i).expect("index in range") = v;
    }
}

/// Gradients over the trainable parameters of a [`ClientModel`].
#[derive(Debug, Clone)]
pub struct Gradients<F> {
    pub b_train: Vec<Array2<F>>,
    pub classifier: Array2<F>,
}

impl<F: Scalar> Gradients<F> {
    pub fn zeros_like(model: &ClientModel<F>) -> Self {
        Self {
            b_train: model
                .layers
                .iter()
                .map(|l| Array2::zeros(l.b_train.dim()))
                .collect(),
            classifier: Array2::zeros(model.classifier.dim()),
        }
    }

    /// `self += s * other`.
    pub fn add_scaled(&mut self, other: &Self, s: F) {
        for (a, b) in self.b_train.iter_mut().zip(other.b_train.iter()) {
            a.zip_mut_with(b, |x, &y| *x += s * y);
        }
        self.classifier.zip_mut_with(&other.classifier, |x, &y| *x += s * y);
    }

    /// Adds `s * flat` onto the adapter gradients (layouts must match).
    pub fn add_flat_scaled(&mut self, flat: &FlatVector<F>, s: F) -> Result<()> {
        let total: usize = self.b_train.iter().map(|b| b.len()).sum();
        if flat.len() != total {
            return Err(Error::LayoutMismatch(
                "flat gradient does not match adapter shapes".into(),
            ));
        }
        let mut offset = 0;
        for b in &mut self.b_train {
            for g in b.iter_mut() {
                *g += s * flat.values[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Concatenation in the model's trainable-index order (for oracles).
    pub fn to_vec(&self) -> Vec<F> {
        let mut out = Vec::new();
        for b in &self.b_train {
            out.extend(b.iter().copied());
        }
        out.extend(self.classifier.iter().copied());
        out
    }

    pub fn is_finite(&self) -> bool {
        self.to_vec().iter().all(|v| v.is_finite())
    }
}

/// Forward/backward result for a loss evaluated through a model.
#[derive(Debug, Clone)]
pub struct BackwardOutput<F> {
    pub loss: F,
    pub grads: Gradients<F>,
    pub input_grad: Array2<F>,
}

/// Plain dense model produced by fusing adapters into the backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedModel<F> {
    pub client_id: usize,
    layers: Vec<FusedLayer<F>>,
    classifier: Array2<F>,
    num_classes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedLayer<F> {
    pub weight: Array2<F>,
    pub activation: Activation,
}

impl<F: Scalar> FusedModel<F> {
    pub fn new(
        client_id: usize,
        layers: Vec<FusedLayer<F>>,
        classifier: Array2<F>,
        num_classes: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::LayoutMismatch("model needs at least one layer".into()));
        }
        Ok(Self {
            client_id,
            layers,
            classifier,
            num_classes,
        })
    }

    /// Random dense model (used to pretrain a backbone from scratch).
    pub fn random<R: Rng>(
        client_id: usize,
        dims: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::LayoutMismatch("need at least [d_in, d_out] dims".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for i in 0..dims.len() - 1 {
            let scale = (2.0 / dims[i] as f64).sqrt();
            layers.push(FusedLayer {
                weight: gaussian_matrix(dims[i], dims[i + 1], scale, rng),
                activation: activation_for(i, dims.len() - 1),
            });
        }
        let r_out = dims[dims.len() - 1];
        let classifier = gaussian_matrix(r_out, num_classes, (1.0 / r_out as f64).sqrt(), rng);
        Self::new(client_id, layers, classifier, num_classes)
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layers.iter().map(|l| l.weight.nrows()).collect();
        dims.push(self.layers.last().expect("non-empty").weight.ncols());
        dims
    }

    pub fn layers(&self) -> &[FusedLayer<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [FusedLayer<F>] {
        &mut self.layers
    }

    pub fn classifier(&self) -> &Array2<F> {
        &self.classifier
    }

    pub fn classifier_mut(&mut self) -> &mut Array2<F> {
        &mut self.classifier
    }

    pub fn forward(&self, x: &Array2<F>) -> Result<Array2<F>> {
        let weights: Vec<Array2<F>> = self.layers.iter().map(|l| l.weight.clone()).collect();
        let acts: Vec<Activation> = self.layers.iter().map(|l| l.activation).collect();
        Ok(forward_pass(&weights, &acts, &self.classifier, x)?.logits)
    }

    pub fn gradients<L>(&self, x: &Array2<F>, loss_fn: L) -> Result<FusedBackwardOutput<F>>
    where
        L: FnOnce(&Array2<F>) -> Result<(F, Array2<F>)>,
    {
        let weights: Vec<Array2<F>> = self.layers.iter().map(|l| l.weight.clone()).collect();
        let acts: Vec<Activation> = self.layers.iter().map(|l| l.activation).collect();
        let trace = forward_pass(&weights, &acts, &self.classifier, x)?;
        let (loss, dlogits) = loss_fn(&trace.logits)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                index: first_non_finite_row(&trace.logits).unwrap_or(0),
            });
        }
        let (d_weights, d_classifier, d_input) =
            backward_pass(&trace, &weights, &acts, &self.classifier, &dlogits);
        Ok(FusedBackwardOutput {
            loss,
            grads: FusedGradients {
                layers: d_weights,
                classifier: d_classifier,
            },
            input_grad: d_input,
        })
    }

    /// SGD step over all weights, skipping units whose mask entry is false.
    /// Units are layers `0..L` followed by the classifier at index `L`.
    pub fn sgd_step_masked(&mut self, grads: &FusedGradients<F>, lr: F, unit_mask: &[bool]) {
        for (i, (layer, g)) in self.layers.iter_mut().zip(grads.layers.iter()).enumerate() {
            if unit_mask.get(i).copied().unwrap_or(true) {
                layer.weight.zip_mut_with(g, |w, &d| *w -= lr * d);
            }
        }
        if unit_mask.get(self.layers.len()).copied().unwrap_or(true) {
            self.classifier.zip_mut_with(&grads.classifier, |c, &d| *c -= lr * d);
        }
    }

    pub fn sgd_step(&mut self, grads: &FusedGradients<F>, lr: F) {
        let mask = vec![true; self.layers.len() + 1];
        self.sgd_step_masked(grads, lr, &mask);
    }
}

/// Gradients over all weights of a [`FusedModel`].
#[derive(Debug, Clone)]
pub struct FusedGradients<F> {
    pub layers: Vec<Array2<F>>,
    pub classifier: Array2<F>,
}

#[derive(Debug, Clone)]
pub struct FusedBackwardOutput<F> {
    pub loss: F,
    pub grads: FusedGradients<F>,
    pub input_grad: Array2<F>,
}

/// Anything that exposes logits and an input gradient; attacks and
/// evaluation are generic over this.
pub trait DifferentiableModel<F: Scalar> {
    fn input_dim(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn logits(&self, x: &Array2<F>) -> Result<Array2<F>>;
    /// Backpropagates an upstream `dloss/dlogits` to the input.
    fn input_gradient(&self, x: &Array2<F>, dlogits: &Array2<F>) -> Result<Array2<F>>;
}

impl<F: Scalar> DifferentiableModel<F> for ClientModel<F> {
    fn input_dim(&self) -> usize {
        self.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, x: &Array2<F>) -> Result<Array2<F>> {
        self.forward(x)
    }

    fn input_gradient(&self, x: &Array2<F>, dlogits: &Array2<F>) -> Result<Array2<F>> {
        let weights = self.effective_weights();
        let acts = self.activations();
        let trace = forward_pass(&weights, &acts, &self.classifier, x)?;
        let (_, _, d_input) = backward_pass(&trace, &weights, &acts, &self.classifier, dlogits);
        Ok(d_input)
    }
}

impl<F: Scalar> DifferentiableModel<F> for FusedModel<F> {
    fn input_dim(&self) -> usize {
        self.input_dim()
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, x: &Array2<F>) -> Result<Array2<F>> {
        self.forward(x)
    }

    fn input_gradient(&self, x: &Array2<F>, dlogits: &Array2<F>) -> Result<Array2<F>> {
        let weights: Vec<Array2<F>> = self.layers.iter().map(|l| l.weight.clone()).collect();
        let acts: Vec<Activation> = self.layers.iter().map(|l| l.activation).collect();
        let trace = forward_pass(&weights, &acts, &self.classifier, x)?;
        let (_, _, d_input) = backward_pass(&trace, &weights, &acts, &self.classifier, dlogits);
        Ok(d_input)
    }
}

/// ReLU between backbone layers, identity before the classifier.
pub fn activation_for(layer: usize, num_layers: usize) -> Activation {
    if layer + 1 == num_layers {
        Activation::Identity
    } else {
        Activation::Relu
    }
}

/// Builds the standard layer stack: `w_pre` He-scaled Gaussian, `a_fixed`
/// Gaussian with variance `1/r_in`, `b_train` zero.
pub fn random_layers<F: Scalar, R: Rng>(
    dims: &[usize],
    rank: usize,
    rng: &mut R,
) -> Result<Vec<AdapterLayer<F>>> {
    if dims.len() < 2 {
        return Err(Error::LayoutMismatch("need at least [d_in, d_out] dims".into()));
    }
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for i in 0..dims.len() - 1 {
        let (r_in, r_out) = (dims[i], dims[i + 1]);
        let w_pre = gaussian_matrix(r_in, r_out, (2.0 / r_in as f64).sqrt(), rng);
        let a_fixed = gaussian_matrix(r_in, rank, (1.0 / r_in as f64).sqrt(), rng);
        let b_train = Array2::zeros((rank, r_out));
        layers.push(AdapterLayer::new(
            w_pre,
            a_fixed,
            b_train,
            activation_for(i, dims.len() - 1),
        )?);
    }
    Ok(layers)
}

pub(crate) fn gaussian_matrix<F: Scalar, R: Rng>(
    rows: usize,
    cols: usize,
    std: f64,
    rng: &mut R,
) -> Array2<F> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(rng);
        F::from_f64_c(z * std)
    })
}

struct ForwardTrace<F> {
    /// Input of each layer: `[x, a_1, ..., a_L]` (length `L + 1`).
    layer_inputs: Vec<Array2<F>>,
    /// Pre-activations `z_l` per layer.
    pre_activations: Vec<Array2<F>>,
    logits: Array2<F>,
}

fn forward_pass<F: Scalar>(
    weights: &[Array2<F>],
    activations: &[Activation],
    classifier: &Array2<F>,
    x: &Array2<F>,
) -> Result<ForwardTrace<F>> {
    let mut layer_inputs = Vec::with_capacity(weights.len() + 1);
    let mut pre_activations = Vec::with_capacity(weights.len());
    let mut current = x.clone();
    for (i, (w, act)) in weights.iter().zip(activations.iter()).enumerate() {
        if current.ncols() != w.nrows() {
            return Err(Error::DimensionMismatch {
                layer: i,
                expected: w.nrows(),
                got: current.ncols(),
            });
        }
        let z = current.dot(w);
        let a = act.apply(&z);
        layer_inputs.push(current);
        pre_activations.push(z);
        current = a;
    }
    if current.ncols() != classifier.nrows() {
        return Err(Error::DimensionMismatch {
            layer: weights.len(),
            expected: classifier.nrows(),
            got: current.ncols(),
        });
    }
    let logits = current.dot(classifier);
    layer_inputs.push(current);
    Ok(ForwardTrace {
        layer_inputs,
        pre_activations,
        logits,
    })
}

/// Returns `(d_weights per layer, d_classifier, d_input)`.
fn backward_pass<F: Scalar>(
    trace: &ForwardTrace<F>,
    weights: &[Array2<F>],
    activations: &[Activation],
    classifier: &Array2<F>,
    dlogits: &Array2<F>,
) -> (Vec<Array2<F>>, Array2<F>, Array2<F>) {
    let num_layers = weights.len();
    let backbone_out = &trace.layer_inputs[num_layers];
    let d_classifier = backbone_out.t().dot(dlogits);
    let mut d_act = dlogits.dot(&classifier.t());

    let mut d_weights = vec![Array2::zeros((0, 0)); num_layers];
    for l in (0..num_layers).rev() {
        let dz = &d_act * &activations[l].derivative(&trace.pre_activations[l]);
        d_weights[l] = trace.layer_inputs[l].t().dot(&dz);
        d_act = dz.dot(&weights[l].t());
    }
    (d_weights, d_classifier, d_act)
}

fn first_non_finite_row<F: Scalar>(m: &Array2<F>) -> Option<usize> {
    m.axis_iter(Axis(0))
        .position(|row| row.iter().any(|v| !v.is_finite()))
}

/// Euclidean distance between two slices, accumulated left to right.
pub fn euclidean_distance<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = F::zero();
    for (&x, &y) in a.iter().zip(b.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Arithmetic mean of two flat vectors' blend: `(1 - eta) * a + eta * b`.
pub fn blend<F: Scalar>(a: &FlatVector<F>, b: &FlatVector<F>, eta: F) -> Result<FlatVector<F>> {
    a.check_layout(b, "blend")?;
    let values = a
        .values
        .iter()
        .zip(b.values.iter())
        .map(|(&x, &y)| (F::one() - eta) * x + eta * y)
        .collect();
    Ok(FlatVector {
        values,
        layout: a.layout.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive_rng, stream};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn identity_model() -> ClientModel<f64> {
        // Single identity layer: w_pre = I(3), adapter zero, classifier = I(3).
        let layer = AdapterLayer::new(
            Array2::eye(3),
            Array2::from_shape_fn((3, 1), |_| 0.5),
            Array2::zeros((1, 3)),
            Activation::Identity,
        )
        .expect("valid layer");
        ClientModel::new(7, vec![layer], Array2::eye(3), 3).expect("valid model")
    }

    #[test]
    fn identity_composition_maps_basis_vector_to_itself() {
        let model = identity_model();
        let e1 = array![[1.0, 0.0, 0.0]];
        let logits = model.forward(&e1).expect("forward");
        assert_eq!(logits, e1);
    }

    #[test]
    fn zero_adapters_match_pretrained_only_forward() {
        let mut rng = derive_rng(11, &[stream::INIT]);
        let model = ClientModel::<f64>::random(0, &[4, 6, 5], 2, 3, &mut rng).expect("model");
        let x = gaussian_matrix::<f64, _>(5, 4, 1.0, &mut rng);
        let logits = model.forward(&x).expect("forward");

        // Pretrained-only oracle: drop the adapters entirely.
        let mut h = x.clone();
        for layer in model.layers() {
            h = layer.activation.apply(&h.dot(layer.w_pre()));
        }
        let expected = h.dot(model.classifier());
        assert_abs_diff_eq!(logits, expected, epsilon = 1e-12);
    }

    /// Straight-line triple-loop matmul oracle for the full forward pass.
    fn naive_forward(model: &ClientModel<f64>, x: &Array2<f64>) -> Array2<f64> {
        fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
            let (n, k) = a.dim();
            let m = b.ncols();
            let mut out = Array2::zeros((n, m));
            for i in 0..n {
                for j in 0..m {
                    let mut acc = 0.0;
                    for l in 0..k {
                        acc += a[[i, l]] * b[[l, j]];
                    }
                    out[[i, j]] = acc;
                }
            }
            out
        }
        let mut h = x.clone();
        for layer in model.layers() {
            let eff = &matmul(layer.a_fixed(), layer.b_train()) + layer.w_pre();
            let z = matmul(&h, &eff);
            h = layer.activation.apply(&z);
        }
        matmul(&h, model.classifier())
    }

    #[test]
    fn forward_matches_naive_matmul_oracle() {
        let mut rng = derive_rng(42, &[stream::INIT]);
        let mut model = ClientModel::<f64>::random(0, &[5, 7, 4], 2, 3, &mut rng).expect("model");
        // Non-zero adapters so the low-rank path is exercised.
        for i in 0..model.num_trainable() {
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            model.set_trainable(i, z * 0.3);
        }
        let x = gaussian_matrix::<f64, _>(6, 5, 1.0, &mut rng);
        let got = model.forward(&x).expect("forward");
        let expected = naive_forward(&model, &x);
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn forward_rejects_dimension_mismatch_naming_layer() {
        let model = identity_model();
        let bad = Array2::<f64>::zeros((2, 5));
        match model.forward(&bad) {
            Err(Error::DimensionMismatch { layer: 0, expected: 3, got: 5 }) => {}
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn constant_loss_gives_zero_gradients() {
        let mut rng = derive_rng(3, &[stream::INIT]);
        let model = ClientModel::<f64>::random(0, &[4, 5], 2, 3, &mut rng).expect("model");
        let x = gaussian_matrix::<f64, _>(2, 4, 1.0, &mut rng);
        let out = model
            .gradients(&x, |logits| Ok((0.0, Array2::zeros(logits.dim()))))
            .expect("grads");
        assert!(out.grads.to_vec().iter().all(|&g| g == 0.0));
        assert!(out.input_grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_layer_squared_error_gradient_matches_closed_form() {
        // One linear layer + identity classifier, one sample:
        // loss = ||(W_pre + A B)^T x - t||^2, dL/dB = 2 A^T x (y - t)^T.
        let w_pre = array![[0.4, -0.2], [0.1, 0.3]];
        let a_fixed = array![[0.5], [-0.7]];
        let b_train = array![[0.2, -0.1]];
        let layer =
            AdapterLayer::new(w_pre.clone(), a_fixed.clone(), b_train.clone(), Activation::Identity)
                .expect("layer");
        let model = ClientModel::new(0, vec![layer], Array2::eye(2), 2).expect("model");

        let x = array![[1.3, -0.8]];
        let t = array![[0.5, 0.25]];
        let out = model
            .gradients(&x, |logits| {
                let diff = logits - &t;
                let loss = diff.iter().map(|d| d * d).sum();
                Ok((loss, diff.mapv(|d| 2.0 * d)))
            })
            .expect("grads");

        let eff = &w_pre + &a_fixed.dot(&b_train);
        let y = x.dot(&eff);
        let expected_db = a_fixed.t().dot(&x.t()).dot(&(&y - &t).mapv(|d| 2.0 * d));
        assert_abs_diff_eq!(out.grads.b_train[0], expected_db, epsilon = 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = derive_rng(99, &[stream::INIT]);
        for trial in 0..5 {
            let mut model =
                ClientModel::<f64>::random(trial, &[3, 6, 4], 2, 3, &mut rng).expect("model");
            for i in 0..model.num_trainable() {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                model.set_trainable(i, z * 0.4);
            }
            let x = gaussian_matrix::<f64, _>(4, 3, 1.0, &mut rng);
            // Smooth scalar function of the logits: sum of squares.
            let loss_fn = |logits: &Array2<f64>| {
                Ok((
                    logits.iter().map(|v| v * v).sum::<f64>(),
                    logits.mapv(|v| 2.0 * v),
                ))
            };
            let out = model.gradients(&x, loss_fn).expect("grads");
            let analytic = out.grads.to_vec();
            let h = 1e-5;
            for i in 0..model.num_trainable() {
                let orig = model.trainable(i);
                model.set_trainable(i, orig + h);
                let plus: f64 = model.forward(&x).unwrap().iter().map(|v| v * v).sum();
                model.set_trainable(i, orig - h);
                let minus: f64 = model.forward(&x).unwrap().iter().map(|v| v * v).sum();
                model.set_trainable(i, orig);
                let fd = (plus - minus) / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
                assert!(
                    ((analytic[i] - fd) / denom).abs() <= 1e-4,
                    "param {i}: analytic {} vs fd {fd}",
                    analytic[i]
                );
            }
        }
    }

    #[test]
    fn non_finite_loss_reports_batch_index() {
        let model = identity_model();
        let x = array![[1.0, 0.0, 0.0], [f64::INFINITY, 0.0, 0.0]];
        let err = model
            .gradients(&x, |logits| {
                Ok((logits.sum(), Array2::ones(logits.dim())))
            })
            .expect_err("non-finite");
        match err {
            Error::NonFiniteLoss { index } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn flatten_is_row_major_and_ordered_by_layer() {
        let layer = AdapterLayer::new(
            Array2::<f64>::eye(2),
            Array2::eye(2),
            array![[1.0, 2.0], [3.0, 4.0]],
            Activation::Identity,
        )
        .expect("layer");
        let model = ClientModel::new(0, vec![layer], Array2::eye(2), 2).expect("model");
        let flat = model.flatten_adapters();
        assert_eq!(flat.values(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flat.layout(), &[LayoutEntry { layer: 0, rows: 2, cols: 2 }]);
    }

    #[test]
    fn two_layer_flatten_concatenates_in_layer_order() {
        let l0 = AdapterLayer::new(
            Array2::<f64>::eye(2),
            Array2::eye(2),
            array![[1.0, 0.0], [0.0, 1.0]],
            Activation::Relu,
        )
        .expect("l0");
        let l1 = AdapterLayer::new(
            Array2::<f64>::eye(2),
            Array2::eye(2),
            array![[5.0, 6.0], [7.0, 8.0]],
            Activation::Identity,
        )
        .expect("l1");
        let model = ClientModel::new(0, vec![l0, l1], Array2::eye(2), 2).expect("model");
        let flat = model.flatten_adapters();
        assert_eq!(flat.values(), &[1.0, 0.0, 0.0, 1.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn unflatten_round_trips_on_random_models() {
        let mut rng = derive_rng(5, &[stream::INIT]);
        for trial in 0..100 {
            let dims = vec![
                2 + (trial % 4),
                3 + (trial % 3),
                2 + (trial % 5),
            ];
            let rank = 1 + (trial % 2);
            let mut model =
                ClientModel::<f64>::random(trial, &dims, rank, 3, &mut rng).expect("model");
            for i in 0..model.num_trainable() {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                model.set_trainable(i, z);
            }
            let flat = model.flatten_adapters();
            let mut copy = model.clone();
            copy.set_adapters(&flat.zeros_like()).expect("zero");
            assert!(copy.flatten_adapters().values().iter().all(|&v| v == 0.0));
            copy.set_adapters(&flat).expect("restore");
            assert_eq!(copy, model, "bit-exact round trip");
        }
    }

    #[test]
    fn unflatten_rejects_layout_mismatch() {
        let model = identity_model();
        let bad = FlatVector::new(
            vec![0.0; 4],
            vec![LayoutEntry { layer: 0, rows: 2, cols: 2 }],
        )
        .expect("flat");
        assert!(matches!(
            model.clone().set_adapters(&bad),
            Err(Error::LayoutMismatch(_))
        ));
    }

    #[test]
    fn fuse_with_zero_adapters_equals_pretrained_weights() {
        let mut rng = derive_rng(8, &[stream::INIT]);
        let model = ClientModel::<f64>::random(0, &[4, 5, 3], 2, 2, &mut rng).expect("model");
        let fused = model.fuse();
        for (fl, al) in fused.layers().iter().zip(model.layers()) {
            assert_eq!(&fl.weight, al.w_pre());
        }
    }

    #[test]
    fn fuse_preserves_forward_on_random_models() {
        let mut rng = derive_rng(21, &[stream::INIT]);
        for trial in 0..50 {
            let mut model =
                ClientModel::<f64>::random(trial, &[4, 6, 3], 2, 3, &mut rng).expect("model");
            for i in 0..model.num_trainable() {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
                model.set_trainable(i, z * 0.5);
            }
            let fused = model.fuse();
            let x = gaussian_matrix::<f64, _>(3, 4, 1.0, &mut rng);
            let a = model.forward(&x).expect("model");
            let b = fused.forward(&x).expect("fused");
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn fuse_rank1_two_by_two_hand_case() {
        // w_pre = [[1,0],[0,1]], a = [1; 2], b = [3, 4]:
        // a*b = [[3,4],[6,8]], fused = [[4,4],[6,9]].
        let layer = AdapterLayer::new(
            Array2::<f64>::eye(2),
            array![[1.0], [2.0]],
            array![[3.0, 4.0]],
            Activation::Identity,
        )
        .expect("layer");
        let model = ClientModel::new(0, vec![layer], Array2::eye(2), 2).expect("model");
        let fused = model.fuse();
        assert_eq!(fused.layers()[0].weight, array![[4.0, 4.0], [6.0, 9.0]]);
    }

    #[test]
    fn sgd_step_touches_only_trainable_parameters() {
        let mut rng = derive_rng(13, &[stream::INIT]);
        let mut model = ClientModel::<f64>::random(0, &[4, 5], 2, 3, &mut rng).expect("model");
        let w_pre_before = model.layers()[0].w_pre().clone();
        let a_fixed_before = model.layers()[0].a_fixed().clone();
        let mut grads = Gradients::zeros_like(&model);
        grads.b_train[0].fill(1.0);
        grads.classifier.fill(1.0);
        model.sgd_step(&grads, 0.1);
        assert_eq!(model.layers()[0].w_pre(), &w_pre_before);
        assert_eq!(model.layers()[0].a_fixed(), &a_fixed_before);
        assert!(model.layers()[0].b_train().iter().all(|&b| b == -0.1));
    }

    #[test]
    fn rank_bounds_are_enforced() {
        let err = AdapterLayer::<f64>::new(
            Array2::eye(2),
            Array2::zeros((2, 3)),
            Array2::zeros((3, 2)),
            Activation::Identity,
        )
        .expect_err("rank 3 > min(2,2)");
        assert!(matches!(err, Error::InvalidRank { rank: 3, .. }));
    }

    #[test]
    fn blend_endpoints_and_midpoint() {
        let layout = vec![LayoutEntry { layer: 0, rows: 1, cols: 1 }];
        let a = FlatVector::new(vec![0.0], layout.clone()).unwrap();
        let b = FlatVector::new(vec![2.0], layout).unwrap();
        assert_eq!(blend(&a, &b, 0.0).unwrap().values(), &[0.0]);
        assert_eq!(blend(&a, &b, 1.0).unwrap().values(), &[2.0]);
        assert_eq!(blend(&a, &b, 0.5).unwrap().values(), &[1.0]);
    }

    #[test]
    fn generic_kernels_compile_for_f32() {
        let mut rng = derive_rng(1, &[stream::INIT]);
        let model = ClientModel::<f32>::random(0, &[3, 4], 2, 2, &mut rng).expect("model");
        let x = gaussian_matrix::<f32, _>(2, 3, 1.0, &mut rng);
        let logits = model.forward(&x).expect("forward");
        assert_eq!(logits.dim(), (2, 2));
    }
}
