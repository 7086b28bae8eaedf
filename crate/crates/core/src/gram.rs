//! Gram-matrix style loss and L2 content loss on raw layer activations.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, shape_err, Result};
use crate::features::FilterBank;

/// Uncentered channel co-occurrence `G = A A^T` of activations `[F, h, w]`.
pub fn gram_var(layer: Var<'_>) -> Result<Var<'_>> {
    let s = layer.shape();
    if s.len() != 3 || s.iter().any(|&d| d == 0) {
        return Err(shape_err(format!("gram matrix needs nonempty [F, h, w], got {s:?}")));
    }
    let a = layer.reshape(&[s[0], s[1] * s[2]])?;
    a.matmul(a.transpose()?)
}

pub fn gram_matrix(layer: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    Ok(gram_var(tape.constant(layer.clone()))?.value().as_ref().clone())
}

/// `sum_l w_l |G(o_l) - G_l|_F^2` against precomputed style Grams.
pub fn gram_style_loss_var<'t>(o: &[Var<'t>], style_grams: &[Tensor], weights: &[f64]) -> Result<Var<'t>> {
    if o.len() != style_grams.len() || o.len() != weights.len() || o.is_empty() {
        return Err(shape_err(format!(
            "{} output layers, {} style grams, {} weights",
            o.len(),
            style_grams.len(),
            weights.len()
        )));
    }
    let mut total: Option<Var<'t>> = None;
    for ((l, g), &w) in o.iter().zip(style_grams).zip(weights) {
        let go = gram_var(*l)?;
        if go.shape() != g.shape() {
            return Err(shape_err(format!("gram {:?} vs style gram {:?}", go.shape(), g.shape())));
        }
        let term = go.sub(l.tape().constant(g.clone()))?.square().sum().scale(w);
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("nonempty"))
}

/// Plain form taking both sides as activations.
pub fn gram_style_loss(o: &[Tensor], s: &[Tensor], weights: &[f64]) -> Result<f64> {
    let tape = Tape::new();
    let ov: Vec<Var<'_>> = o.iter().map(|t| tape.constant(t.clone())).collect();
    let grams = s.iter().map(gram_matrix).collect::<Result<Vec<_>>>()?;
    Ok(gram_style_loss_var(&ov, &grams, weights)?.item())
}

/// Squared Frobenius difference of two activation tensors.
pub fn l2_content_loss_var<'t>(o: Var<'t>, c: Var<'t>) -> Result<Var<'t>> {
    if o.shape() != c.shape() {
        return Err(shape_err(format!("content layers differ: {:?} vs {:?}", o.shape(), c.shape())));
    }
    Ok(o.sub(c)?.square().sum())
}

pub fn l2_content_loss(o: &Tensor, c: &Tensor) -> Result<f64> {
    let tape = Tape::new();
    Ok(l2_content_loss_var(tape.constant(o.clone()), tape.constant(c.clone()))?.item())
}

/// Bank layers used by the Gram baseline: the first layer of every block
/// for style and the first layer of the fourth block (or the last block on
/// shallower banks) for content.
#[derive(Clone, Debug, PartialEq)]
pub struct GramLayers {
    pub style: Vec<usize>,
    pub content: usize,
}

impl GramLayers {
    pub fn for_bank(bank: &FilterBank) -> Self {
        let starts = bank.block_starts();
        let content = starts[starts.len().min(4) - 1];
        Self { style: starts, content }
    }

    pub fn deepest(&self) -> usize {
        self.style.iter().copied().max().unwrap_or(0).max(self.content)
    }
}

/// Per-layer weights `1 / (4 F^2 M^2)` with `F` channels and `M` positions.
pub fn gram_weights(style_layers: &[Tensor]) -> Vec<f64> {
    style_layers
        .iter()
        .map(|t| {
            let s = t.shape();
            let (f, m) = (s[0] as f64, (s[1] * s[2]) as f64);
            1.0 / (4.0 * f * f * m * m)
        })
        .collect()
}

/// Precomputed style and content targets for the Gram baseline objective.
#[derive(Clone, Debug)]
pub struct GramTargets {
    pub layers: GramLayers,
    pub style_grams: Vec<Tensor>,
    pub weights: Vec<f64>,
    pub content: Tensor,
}

impl GramTargets {
    /// `content` and `style` are `[3, H, W]` RGB tensors.
    pub fn new(bank: &FilterBank, content: &Tensor, style: &Tensor) -> Result<Self> {
        let layers = GramLayers::for_bank(bank);
        let acts = |img: &Tensor| -> Result<Vec<Tensor>> {
            let tape = Tape::new();
            let a = bank.activations_upto(tape.constant(img.clone()), layers.deepest())?;
            Ok(a.iter().map(|v| v.value().as_ref().clone()).collect())
        };
        let sa = acts(style)?;
        let ca = acts(content)?;
        let style_layers: Vec<Tensor> = layers.style.iter().map(|&l| sa[l].clone()).collect();
        let style_grams = style_layers.iter().map(gram_matrix).collect::<Result<Vec<_>>>()?;
        let weights = gram_weights(&style_layers);
        Ok(Self { content: ca[layers.content].clone(), layers, style_grams, weights })
    }

    /// Style loss of an image variable `[3, H, W]` against the targets.
    pub fn style_loss<'t>(&self, bank: &FilterBank, img: Var<'t>) -> Result<Var<'t>> {
        let acts = bank.activations_upto(img, self.layers.deepest())?;
        let o: Vec<Var<'t>> = self.layers.style.iter().map(|&l| acts[l]).collect();
        gram_style_loss_var(&o, &self.style_grams, &self.weights)
    }

    /// Content loss normalized by the layer size so the trade-off weight is
    /// independent of resolution.
    pub fn content_loss<'t>(&self, bank: &FilterBank, img: Var<'t>) -> Result<Var<'t>> {
        let acts = bank.activations_upto(img, self.layers.content)?;
        let o = acts[self.layers.content];
        let c = img.tape().constant(self.content.clone());
        Ok(l2_content_loss_var(o, c)?.scale(1.0 / self.content.len() as f64))
    }

    /// `alpha * content + style`.
    pub fn objective<'t>(&self, bank: &FilterBank, img: Var<'t>, alpha: f64) -> Result<Var<'t>> {
        if !(alpha >= 0.0) {
            return Err(invalid(format!("content weight must be nonnegative, got {alpha}")));
        }
        self.content_loss(bank, img)?.scale(alpha).add(self.style_loss(bank, img)?)
    }
}
