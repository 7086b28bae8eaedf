//! Multiscale style transfer by relaxed optimal transport and
//! self-similarity.
//!
//! At each scale the output is parameterized as a Laplacian pyramid and
//! optimized with RMSprop against
//! `(alpha * l_content + l_moment + l_remd + l_palette / alpha) / (2 + alpha + 1/alpha)`,
//! with fresh feature coordinates drawn every step.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{invalid, Error, Result};
use crate::features::{flat_indices, grid_dims, sample_coords, FeatureTensor, FilterBank, FilterBankSpec, SampleMode};
use crate::guidance::GuidanceSpec;
use crate::image::{ColorSpace, ImageBuffer};
use crate::optim::{Optimizer, RmsProp};
use crate::progress::{wants_preview, Observer, Progress};
use crate::pyramid::{collapse_vars, max_levels, LaplacianPyramid};
use crate::selfsim::content_loss_var;
use crate::transport::{cosine_costs, guidance_mask, moment_loss_var, palette_loss_var, remd_var, CostMask, GridGuidance};

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct StrotssConfig {
    /// Content weight before the per-scale halving.
    pub alpha: f64,
    pub scales: usize,
    pub coarsest_long_side: usize,
    pub steps: usize,
    pub lr: f64,
    /// Learning rate at the last scale.
    pub final_lr: f64,
    pub samples: usize,
    pub pyramid_levels: usize,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub seed: u64,
    pub bank: FilterBankSpec,
}

impl Default for StrotssConfig {
    fn default() -> Self {
        Self {
            alpha: 16.0,
            scales: 4,
            coarsest_long_side: 64,
            steps: 200,
            lr: 0.002,
            final_lr: 0.001,
            samples: 1024,
            pyramid_levels: 5,
            rms_decay: 0.99,
            rms_eps: 1e-8,
            seed: 0,
            bank: FilterBankSpec::default(),
        }
    }
}

impl StrotssConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(invalid(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.scales == 0 || self.samples == 0 || self.pyramid_levels == 0 || self.coarsest_long_side < 16 {
            return Err(invalid("scales, samples and pyramid levels must be >= 1 and the coarsest side >= 16"));
        }
        Ok(())
    }

    /// Content weight used at each scale: halved before every scale, so
    /// 16 over four scales gives 8, 4, 2, 1.
    pub fn alpha_schedule(&self) -> Vec<f64> {
        (1..=self.scales).map(|s| self.alpha / f64::powi(2.0, s as i32)).collect()
    }

    pub fn long_side(&self, scale: usize) -> usize {
        self.coarsest_long_side << scale
    }

    pub fn lr_for(&self, scale: usize) -> f64 {
        if scale + 1 == self.scales {
            self.final_lr
        } else {
            self.lr
        }
    }
}

/// Weights `(content, moment, remd, palette)` of the total objective.
pub fn term_weights(alpha: f64) -> [f64; 4] {
    let z = 2.0 + alpha + 1.0 / alpha;
    [alpha / z, 1.0 / z, 1.0 / z, 1.0 / (alpha * z)]
}

/// Finest Laplacian band of `img`: `img - up(down(img))`.
pub fn high_frequencies(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.height() < 2 || img.width() < 2 {
        return Ok(ImageBuffer::filled(img.height(), img.width(), &vec![0.0; img.channels()], img.colorspace())?);
    }
    Ok(LaplacianPyramid::build(img, 2)?.into_levels().swap_remove(0))
}

fn add_color(mut img: ImageBuffer, color: &[f64]) -> ImageBuffer {
    let c = img.channels();
    for px in img.data_mut().chunks_exact_mut(c) {
        px.iter_mut().zip(color).for_each(|(v, m)| *v += m);
    }
    img
}

/// Coarsest-scale initialization: the content's high frequencies at
/// `long_side` on top of the style's mean color.
pub fn init_output(content: &ImageBuffer, style: &ImageBuffer, long_side: usize) -> Result<ImageBuffer> {
    content.expect_rgb()?;
    style.expect_rgb()?;
    let c = content.resize_long_side(long_side)?;
    Ok(add_color(high_frequencies(&c)?, &style.mean_color()))
}

/// Individual objective terms of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct Terms {
    pub content: f64,
    pub moment: f64,
    pub remd: f64,
    pub palette: f64,
    pub total: f64,
}

/// Per-step instrumentation of the nearest-cost selections inside the
/// relaxed EMD.
#[derive(Clone, Copy, Debug, Default, PartialEq, serde::Serialize)]
pub struct Selections {
    /// Selections landing on a forbidden entry (always zero unless the
    /// solver is broken).
    pub forbidden: usize,
    /// Selections landing on a beta-weighted entry.
    pub guided: usize,
    pub total: usize,
}

/// Weighted pieces of one objective evaluation.
pub struct LossParts<'t> {
    pub content: Var<'t>,
    pub style: Var<'t>,
    pub terms: Terms,
    pub selections: Selections,
}

impl Selections {
    pub fn absorb(&mut self, other: Selections) {
        self.forbidden += other.forbidden;
        self.guided += other.guided;
        self.total += other.total;
    }
}

/// Everything fixed while optimizing one scale.
pub struct ScaleProblem<'b> {
    bank: &'b FilterBank,
    alpha: f64,
    dims: (usize, usize),
    content: FeatureTensor,
    style: FeatureTensor,
    /// Style colors pooled onto the style grid, `[cells, 3]`.
    style_pixels: Tensor,
    guidance: Option<GridGuidance>,
}

fn features_of(bank: &FilterBank, img: &ImageBuffer) -> Result<FeatureTensor> {
    let tape = Tape::new();
    let f = bank.forward(tape.constant(img.to_chw()))?;
    let (gh, gw) = grid_dims(img.height(), img.width());
    FeatureTensor::new(gh, gw, bank.dim(), f.value().data().to_vec())
}

/// `[3, H, W]` pooled twice to the feature grid, as rows `[cells, 3]`.
fn grid_pixels(img: Var<'_>) -> Result<Var<'_>> {
    let p = img.avg_pool2()?.avg_pool2()?;
    let s = p.shape();
    p.reshape(&[3, s[1] * s[2]])?.transpose()
}

impl<'b> ScaleProblem<'b> {
    /// `content` and `style` are already resized to this scale; guidance is
    /// already projected onto their grids.
    pub fn new(
        bank: &'b FilterBank,
        content: &ImageBuffer,
        style: &ImageBuffer,
        alpha: f64,
        guidance: Option<GridGuidance>,
    ) -> Result<Self> {
        content.expect_rgb()?;
        style.expect_rgb()?;
        let cf = features_of(bank, content)?;
        let sf = features_of(bank, style)?;
        if let Some(g) = &guidance {
            if g.content_grid() != cf.grid() || g.style_grid() != sf.grid() {
                return Err(invalid("guidance grids do not match the feature grids"));
            }
        }
        let tape = Tape::new();
        let style_pixels = grid_pixels(tape.constant(style.to_chw()))?.value().as_ref().clone();
        Ok(Self {
            bank,
            alpha,
            dims: (content.height(), content.width()),
            content: cf,
            style: sf,
            style_pixels,
            guidance: guidance.filter(|g| !g.is_empty()),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.dims
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Draws content coordinates on a jittered grid and style coordinates
    /// uniformly, each at most `n`. Every guidance region gets at least one
    /// coordinate on both sides so its constraint is active.
    pub fn draw_coords(&self, n: usize, rng: &mut impl Rng) -> Result<(Vec<(usize, usize)>, Vec<(usize, usize)>)> {
        let (ch, cw) = self.content.grid();
        let (sh, sw) = self.style.grid();
        let mut cc = sample_coords(ch, cw, n.min(ch * cw), SampleMode::JitteredGrid, rng)?;
        let mut sc = sample_coords(sh, sw, n.min(sh * sw), SampleMode::RandomUniform, rng)?;
        if let Some(g) = &self.guidance {
            for (cm, sm) in g.pairs() {
                ensure_covered(&mut cc, cm, cw, rng);
                ensure_covered(&mut sc, sm, sw, rng);
            }
        }
        Ok((cc, sc))
    }

    /// Guidance mask for the given coordinates, with style coordinates whose
    /// column would be entirely forbidden removed.
    fn mask_for(&self, cc: &[(usize, usize)], sc: &[(usize, usize)]) -> Result<(Vec<(usize, usize)>, CostMask)> {
        let Some(g) = &self.guidance else { return Ok((sc.to_vec(), CostMask::default())) };
        let mask = guidance_mask(g, cc, sc)?;
        let Some(f) = &mask.forbidden else { return Ok((sc.to_vec(), mask)) };
        let m = sc.len();
        let keep: Vec<usize> = (0..m).filter(|&j| (0..cc.len()).any(|i| !f[i * m + j])).collect();
        if keep.len() == m {
            return Ok((sc.to_vec(), mask));
        }
        let sc: Vec<(usize, usize)> = keep.iter().map(|&j| sc[j]).collect();
        Ok((sc.clone(), guidance_mask(g, cc, &sc)?))
    }

    /// Total objective of the image variable `[3, H, W]` on the given
    /// coordinates.
    pub fn loss<'t>(
        &self,
        img: Var<'t>,
        cc: &[(usize, usize)],
        sc: &[(usize, usize)],
    ) -> Result<(Var<'t>, Terms, Selections)> {
        let p = self.loss_parts(img, cc, sc)?;
        Ok((p.content.add(p.style)?, p.terms, p.selections))
    }

    /// The objective split into its weighted content term and the weighted
    /// sum of the three style terms.
    pub fn loss_parts<'t>(&self, img: Var<'t>, cc: &[(usize, usize)], sc: &[(usize, usize)]) -> Result<LossParts<'t>> {
        let tape = img.tape();
        let (sc, mask) = self.mask_for(cc, sc)?;
        let (_, cw) = self.content.grid();
        let (_, sw) = self.style.grid();
        let ci = flat_indices(cc, cw);
        let si = flat_indices(&sc, sw);
        let feats = self.bank.forward(img)?;
        let o = feats.gather_rows(&ci)?;
        let c = tape.constant(self.content.sample(cc)?.vectors().clone());
        let s = tape.constant(self.style.sample(&sc)?.vectors().clone());
        let o_px = grid_pixels(img)?.gather_rows(&ci)?;
        let s_px = tape.constant(self.style_pixels.clone()).gather_rows(&si)?;

        let l_c = content_loss_var(o, c)?;
        let l_m = moment_loss_var(o, s)?;
        let remd = remd_var(cosine_costs(o, s, false)?, &mask)?;
        let l_p = palette_loss_var(o_px, s_px)?;
        let [wc, wm, wr, wp] = term_weights(self.alpha);
        let content = l_c.scale(wc);
        let style = l_m.scale(wm).add(remd.loss.scale(wr))?.add(l_p.scale(wp))?;
        let terms = Terms {
            content: l_c.item(),
            moment: l_m.item(),
            remd: remd.loss.item(),
            palette: l_p.item(),
            total: content.item() + style.item(),
        };
        let m = sc.len();
        let mut sel = Selections::default();
        let mut note = |k: usize| {
            sel.total += 1;
            if mask.forbidden.as_ref().is_some_and(|f| f[k]) {
                sel.forbidden += 1;
            }
            if mask.weights.as_ref().is_some_and(|w| w[k] != 1.0) {
                sel.guided += 1;
            }
        };
        remd.row_argmin.iter().enumerate().for_each(|(i, &j)| note(i * m + j));
        remd.col_argmin.iter().enumerate().for_each(|(j, &i)| note(i * m + j));
        Ok(LossParts { content, style, terms, selections: sel })
    }

    /// Objective of a plain image on fixed coordinates.
    pub fn evaluate(&self, img: &ImageBuffer, cc: &[(usize, usize)], sc: &[(usize, usize)]) -> Result<Terms> {
        let tape = Tape::new();
        Ok(self.loss(tape.constant(img.to_chw()), cc, sc)?.1)
    }
}

fn ensure_covered(coords: &mut Vec<(usize, usize)>, region: &[bool], gw: usize, rng: &mut impl Rng) {
    if coords.iter().any(|&(r, c)| region[r * gw + c]) {
        return;
    }
    let cells: Vec<usize> = region.iter().enumerate().filter(|(_, &b)| b).map(|(k, _)| k).collect();
    let k = cells[index::sample(rng, cells.len(), 1).index(0)];
    coords.push((k / gw, k % gw));
}

/// Optimization record of one scale.
#[derive(Clone, Debug, Default, PartialEq, serde::Serialize)]
pub struct ScaleReport {
    pub long_side: usize,
    pub alpha: f64,
    /// Objective before each update.
    pub losses: Vec<f64>,
    pub selections: Selections,
}

/// Settings for [`stylize_scale`].
#[derive(Clone, Copy, Debug)]
pub struct ScaleSchedule {
    pub steps: usize,
    pub lr: f64,
    pub samples: usize,
    pub pyramid_levels: usize,
    pub rms_decay: f64,
    pub rms_eps: f64,
    pub scale: usize,
    pub scales: usize,
}

/// Runs RMSprop on the Laplacian coefficients of `init`.
pub fn stylize_scale(
    problem: &ScaleProblem<'_>,
    init: &ImageBuffer,
    sched: &ScaleSchedule,
    rng: &mut ChaCha8Rng,
    observer: &dyn Observer,
) -> Result<(ImageBuffer, ScaleReport)> {
    if (init.height(), init.width()) != problem.dims() {
        return Err(invalid("initialization does not match the scale dimensions"));
    }
    let levels = sched.pyramid_levels.min(max_levels(init.height(), init.width()));
    let pyr = LaplacianPyramid::build(init, levels)?;
    let mut params: Vec<Tensor> = pyr.levels().iter().map(ImageBuffer::to_chw).collect();
    let mut opt = RmsProp::new(sched.lr, sched.rms_decay, sched.rms_eps)?;
    let mut report = ScaleReport {
        long_side: problem.dims().0.max(problem.dims().1),
        alpha: problem.alpha(),
        ..Default::default()
    };
    for step in 1..=sched.steps {
        if observer.cancelled() {
            return Err(Error::Cancelled);
        }
        let (cc, sc) = problem.draw_coords(sched.samples, rng)?;
        let tape = Tape::new();
        let leaves: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let img = collapse_vars(&leaves)?;
        let (loss, terms, sel) = problem.loss(img, &cc, &sc)?;
        let grads = tape.backward(loss)?;
        let g: Vec<Tensor> = leaves.iter().map(|&l| grads.wrt(l)).collect();
        opt.step(&mut params, &g)?;
        report.losses.push(terms.total);
        report.selections.absorb(sel);
        let p = Progress { scale: sched.scale, scales: sched.scales, step, steps: sched.steps, loss: terms.total };
        observer.on_step(&p);
        if wants_preview(observer, step, sched.steps) {
            observer.on_preview(&p, &collapse_params(&params)?.clamp01());
        }
    }
    Ok((collapse_params(&params)?, report))
}

pub(crate) fn collapse_params(params: &[Tensor]) -> Result<ImageBuffer> {
    let levels = params.iter().map(|t| ImageBuffer::from_chw(t, ColorSpace::Srgb)).collect::<Result<Vec<_>>>()?;
    LaplacianPyramid::from_levels(levels)?.collapse()
}

/// Starting image of a scale: the style's mean color under the content's
/// high frequencies at the coarsest scale, otherwise the upsampled previous
/// result plus the content band the previous scale could not represent.
pub(crate) fn scale_init(prev: Option<ImageBuffer>, content: &ImageBuffer, style: &ImageBuffer) -> Result<ImageBuffer> {
    let band = high_frequencies(content)?;
    Ok(match prev {
        None => add_color(band, &style.mean_color()),
        Some(prev) => {
            let mut img = prev.resize_bilinear(content.height(), content.width())?;
            img.data_mut().iter_mut().zip(band.data()).for_each(|(v, b)| *v += b);
            img
        }
    })
}

#[derive(Clone, Debug)]
pub struct StrotssOutput {
    pub image: ImageBuffer,
    pub reports: Vec<ScaleReport>,
}

/// Full coarse-to-fine run. Guidance refers to the full-resolution inputs.
pub fn stylize(
    content: &ImageBuffer,
    style: &ImageBuffer,
    config: &StrotssConfig,
    guidance: Option<&GuidanceSpec>,
    observer: &dyn Observer,
) -> Result<StrotssOutput> {
    config.validate()?;
    content.expect_rgb()?;
    style.expect_rgb()?;
    let bank = FilterBank::new(config.bank.clone())?;
    let cdims = (content.height(), content.width());
    let sdims = (style.height(), style.width());
    if let Some(g) = guidance {
        g.validate(cdims, sdims)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out: Option<ImageBuffer> = None;
    let mut reports = Vec::with_capacity(config.scales);
    for (scale, alpha) in config.alpha_schedule().into_iter().enumerate() {
        let long = config.long_side(scale);
        let c = content.resize_long_side(long)?;
        let s = style.resize_long_side(long)?;
        if c.height().min(c.width()) < 16 || s.height().min(s.width()) < 16 {
            return Err(invalid(format!("inputs are too elongated for a {long}px scale")));
        }
        let init = scale_init(out.take(), &c, style)?;
        let g = match guidance.filter(|g| !g.is_empty()) {
            Some(g) => Some(g.to_grid(cdims, sdims, grid_dims(c.height(), c.width()), grid_dims(s.height(), s.width()))?),
            None => None,
        };
        let problem = ScaleProblem::new(&bank, &c, &s, alpha, g)?;
        let sched = ScaleSchedule {
            steps: config.steps,
            lr: config.lr_for(scale),
            samples: config.samples,
            pyramid_levels: config.pyramid_levels,
            rms_decay: config.rms_decay,
            rms_eps: config.rms_eps,
            scale,
            scales: config.scales,
        };
        let (img, report) = stylize_scale(&problem, &init, &sched, &mut rng, observer)?;
        reports.push(report);
        out = Some(img);
    }
    Ok(StrotssOutput { image: out.expect("at least one scale").clamp01(), reports })
}
