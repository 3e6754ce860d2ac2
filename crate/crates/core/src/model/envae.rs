use serde::{Deserialize, Serialize};

use super::grouping::{
    expert_widths_for_budget, make_grouping, FeatureGrouping, GroupMask, BASELINE_HIDDEN,
};
use crate::distributions::{clamp_log_var, DiagGaussian, GaussianBatch, UniformMixture, LOG_VAR_MAX, LOG_VAR_MIN};
use crate::numeric::{
    argmax_rows, derive_seed, softmax_cross_entropy, Matrix, Mlp, MlpCache, MlpGrads, MlpSpec, Mode, Rng,
};
use crate::{Error, Result};

/// Largest group count for which every subset is enumerated.
pub const MAX_ENUMERATED_GROUPS: usize = 8;

/// How the reconstruction part of the ELBO visits subsets of groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElboMode {
    /// One reconstruction per non-empty subset, averaged.
    FullEnumeration,
    /// Per row, `samples` subsets drawn uniformly, one reconstruction each.
    MixtureSample { samples: usize },
}

impl ElboMode {
    /// Full enumeration up to 4 groups, one sampled subset per row above.
    pub fn default_for(n_groups: usize) -> Self {
        if n_groups <= 4 {
            ElboMode::FullEnumeration
        } else {
            ElboMode::MixtureSample { samples: 1 }
        }
    }

    pub fn validate(&self, n_groups: usize) -> Result<()> {
        match *self {
            ElboMode::FullEnumeration if n_groups > MAX_ENUMERATED_GROUPS => {
                Err(Error::invalid(format!(
                    "full enumeration with m = {n_groups} would decode 2^{n_groups} - 1 = {} subsets per batch; \
                     it is limited to m <= {MAX_ENUMERATED_GROUPS}, use mixture_sample instead",
                    (1u64 << n_groups) - 1
                )))
            }
            ElboMode::MixtureSample { samples: 0 } => {
                Err(Error::invalid("mixture_sample needs at least one sample"))
            }
            _ => Ok(()),
        }
    }
}

/// How missing-group inference reduces the available experts to one Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentReduction {
    /// Product of all available experts.
    #[default]
    PoeFull,
    /// Moment-matched mixture over every subset of the available experts.
    MixtureMean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub n_classes: usize,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub batch_norm: bool,
}

impl HeadConfig {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n_classes,
            hidden: vec![64, 64],
            dropout: 0.5,
            batch_norm: true,
        }
    }
}

/// Architecture and objective settings of an [`EnVae`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_dim: usize,
    pub n_groups: usize,
    /// Hidden widths of every expert; `None` matches the parameter budget of
    /// a single model with `baseline_hidden`.
    pub hidden: Option<Vec<usize>>,
    pub baseline_hidden: Vec<usize>,
    pub dropout: f64,
    pub batch_norm: bool,
    pub include_prior: bool,
    /// `None` picks [`ElboMode::default_for`].
    pub elbo_mode: Option<ElboMode>,
    pub beta: f64,
    pub head: Option<HeadConfig>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            n_groups: 1,
            hidden: None,
            baseline_hidden: BASELINE_HIDDEN.to_vec(),
            dropout: 0.5,
            batch_norm: true,
            include_prior: true,
            elbo_mode: None,
            beta: 1.0,
            head: None,
        }
    }
}

/// Value of the objective on one batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboTerms {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
    pub ce: Option<f64>,
}

/// Gradients in the order of [`EnVae::params_mut`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrads {
    pub encoders: Vec<MlpGrads>,
    pub decoders: Vec<MlpGrads>,
    pub head: Option<MlpGrads>,
}

impl ModelGrads {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for g in self.encoders.iter().chain(&self.decoders).chain(&self.head) {
            out.extend(g.slices());
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for g in self
            .encoders
            .iter_mut()
            .chain(self.decoders.iter_mut())
            .chain(self.head.iter_mut())
        {
            out.extend(g.slices_mut());
        }
        out
    }
}

/// Posteriors of every non-empty subset of the available groups, sorted by mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetPosteriors {
    pub entries: Vec<(GroupMask, GaussianBatch)>,
}

impl SubsetPosteriors {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, mask: GroupMask) -> Option<&GaussianBatch> {
        self.entries
            .binary_search_by_key(&mask, |e| e.0)
            .ok()
            .map(|i| &self.entries[i].1)
    }
}

/// Product of the given expert batches (plus the standard-normal prior).
/// Row-wise identical to [`crate::distributions::poe_combine`].
pub fn fuse_batches(experts: &[&GaussianBatch], dim: usize, include_prior: bool) -> Result<GaussianBatch> {
    let Some(first) = experts.first() else {
        return Err(Error::invalid("fusion over no experts needs a batch size"));
    };
    let b = first.len();
    if experts.iter().any(|e| e.len() != b || e.dim() != dim) {
        return Err(Error::shape("expert batches differ in shape"));
    }
    let mut mean = Matrix::zeros(b, dim);
    let mut log_var = Matrix::zeros(b, dim);
    let mut prec = vec![0.0; dim];
    for r in 0..b {
        fuse_row(
            experts.iter().map(|e| (e.mean.row(r), e.log_var.row(r))),
            include_prior,
            &mut prec,
            mean.row_mut(r),
            log_var.row_mut(r),
        );
    }
    for v in log_var.data_mut() {
        *v = clamp_log_var(*v);
    }
    Ok(GaussianBatch { mean, log_var })
}

/// Writes the fused mean and unclamped log-variance; `prec` receives `T`.
fn fuse_row<'a>(
    experts: impl Iterator<Item = (&'a [f64], &'a [f64])>,
    include_prior: bool,
    prec: &mut [f64],
    mean: &mut [f64],
    log_var: &mut [f64],
) {
    prec.fill(if include_prior { 1.0 } else { 0.0 });
    mean.fill(0.0);
    let mut count = 0;
    let mut last = None;
    for (mu, lv) in experts {
        count += 1;
        last = Some((mu, lv));
        for l in 0..prec.len() {
            let t = (-lv[l]).exp();
            prec[l] += t;
            mean[l] += t * mu[l];
        }
    }
    if let (1, false, Some((mu, lv))) = (count, include_prior, last) {
        // a lone expert is its own product
        mean.copy_from_slice(mu);
        log_var.copy_from_slice(lv);
        return;
    }
    for l in 0..prec.len() {
        mean[l] /= prec[l];
        log_var[l] = -prec[l].ln();
    }
}

/// Subset posteriors for every non-empty `A ⊆ available`.
pub fn subset_posteriors(
    group_posteriors: &[GaussianBatch],
    available: GroupMask,
    include_prior: bool,
) -> Result<SubsetPosteriors> {
    if available.is_empty() {
        return Err(Error::invalid("no groups available"));
    }
    if available.groups().any(|g| g >= group_posteriors.len()) {
        return Err(Error::invalid(format!(
            "mask {:#b} names groups beyond the {} given",
            available.0,
            group_posteriors.len()
        )));
    }
    let dim = group_posteriors[0].dim();
    let entries = available
        .nonempty_subsets()
        .into_iter()
        .map(|a| {
            let experts: Vec<&GaussianBatch> = a.groups().map(|g| &group_posteriors[g]).collect();
            fuse_batches(&experts, dim, include_prior).map(|p| (a, p))
        })
        .collect::<Result<_>>()?;
    Ok(SubsetPosteriors { entries })
}

/// Uniform mixture over the subset posteriors of one sample.
pub fn joint_posterior(subsets: &SubsetPosteriors, row: usize) -> Result<UniformMixture> {
    UniformMixture::new(subsets.entries.iter().map(|(_, p)| p.row(row)).collect())
}

/// Ensemble of per-group VAEs fused by a mixture of products of experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnVae {
    grouping: FeatureGrouping,
    latent_dim: usize,
    encoders: Vec<Mlp>,
    decoders: Vec<Mlp>,
    head: Option<Mlp>,
    beta: f64,
    include_prior: bool,
    elbo_mode: ElboMode,
}

/// Experts of one batch with what the backward pass needs.
struct Experts {
    mean: Vec<Matrix>,
    log_var: Vec<Matrix>,
    /// `exp(−log_var)`
    precision: Vec<Matrix>,
    /// Raw encoder log-variance inside the clamp range.
    in_range: Vec<Vec<bool>>,
}

impl Experts {
    fn from_outputs(outputs: &[Matrix], latent_dim: usize) -> Result<Self> {
        let mut e = Experts {
            mean: vec![],
            log_var: vec![],
            precision: vec![],
            in_range: vec![],
        };
        for out in outputs {
            let (_, raw) = out.split_columns(latent_dim);
            let g = GaussianBatch::from_encoder_output(out, latent_dim)?;
            e.in_range.push(
                raw.data()
                    .iter()
                    .map(|v| (LOG_VAR_MIN..=LOG_VAR_MAX).contains(v))
                    .collect(),
            );
            e.precision.push(g.log_var.map(|v| (-v).exp()));
            e.mean.push(g.mean);
            e.log_var.push(g.log_var);
        }
        Ok(e)
    }
}

/// Fused posteriors for a list of `(row, mask)` terms, flattened `n × L`.
struct Fused {
    rows: Vec<usize>,
    masks: Vec<GroupMask>,
    mean: Vec<f64>,
    log_var: Vec<f64>,
    precision: Vec<f64>,
    clamped: Vec<bool>,
}

impl Fused {
    fn compute(e: &Experts, terms: Vec<(usize, GroupMask)>, l: usize, include_prior: bool) -> Self {
        let n = terms.len();
        let mut f = Fused {
            rows: Vec::with_capacity(n),
            masks: Vec::with_capacity(n),
            mean: vec![0.0; n * l],
            log_var: vec![0.0; n * l],
            precision: vec![0.0; n * l],
            clamped: vec![false; n * l],
        };
        for (t, (row, mask)) in terms.into_iter().enumerate() {
            let s = t * l..(t + 1) * l;
            fuse_row(
                mask.groups().map(|g| (e.mean[g].row(row), e.log_var[g].row(row))),
                include_prior,
                &mut f.precision[s.clone()],
                &mut f.mean[s.clone()],
                &mut f.log_var[s.clone()],
            );
            for k in s {
                let v = f.log_var[k];
                f.clamped[k] = !(LOG_VAR_MIN..=LOG_VAR_MAX).contains(&v);
                f.log_var[k] = clamp_log_var(v);
            }
            f.rows.push(row);
            f.masks.push(mask);
        }
        f
    }

    fn len(&self) -> usize {
        self.rows.len()
    }

    fn kl(&self, t: usize, l: usize) -> f64 {
        (t * l..(t + 1) * l)
            .map(|k| 0.5 * (self.mean[k].powi(2) + self.log_var[k].exp() - 1.0 - self.log_var[k]))
            .sum()
    }

    fn sample(&self, eps: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect()
    }

    /// Pushes `(∂/∂μ_A, ∂/∂lv_A)` of every term back onto the experts.
    fn backward(&self, e: &Experts, g_mean: &[f64], g_lv: &[f64], l: usize, gm: &mut [Matrix], glv: &mut [Matrix]) {
        for t in 0..self.len() {
            let row = self.rows[t];
            for g in self.masks[t].groups() {
                let mu_i = e.mean[g].row(row);
                let p_i = e.precision[g].row(row);
                let gm_row = gm[g].row_mut(row);
                for j in 0..l {
                    let k = t * l + j;
                    let w = p_i[j] / self.precision[k];
                    gm_row[j] += g_mean[k] * w;
                }
                let glv_row = glv[g].row_mut(row);
                for j in 0..l {
                    let k = t * l + j;
                    let w = p_i[j] / self.precision[k];
                    let glv_a = if self.clamped[k] { 0.0 } else { g_lv[k] };
                    glv_row[j] += -g_mean[k] * w * (mu_i[j] - self.mean[k]) + glv_a * w;
                }
            }
        }
    }
}

fn check_dropout(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::invalid(format!("dropout {p} outside [0, 1)")));
    }
    Ok(())
}

impl EnVae {
    /// Random grouping of `n_features` and freshly initialized experts.
    pub fn new(n_features: usize, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.latent_dim == 0 {
            return Err(Error::invalid("latent dimension must be positive"));
        }
        check_dropout(cfg.dropout)?;
        let grouping = make_grouping(n_features, cfg.n_groups, derive_seed(seed, &[0x6B]))?;
        let hidden = match &cfg.hidden {
            Some(h) => h.clone(),
            None => expert_widths_for_budget(n_features, cfg.latent_dim, cfg.n_groups, &cfg.baseline_hidden)?,
        };
        let rev: Vec<usize> = hidden.iter().rev().copied().collect();
        let l = cfg.latent_dim;
        let mut encoders = Vec::with_capacity(cfg.n_groups);
        let mut decoders = Vec::with_capacity(cfg.n_groups);
        for (g, size) in grouping.sizes().into_iter().enumerate() {
            let enc = MlpSpec::new(size, &hidden, 2 * l)
                .with_batch_norm(cfg.batch_norm)
                .with_dropout(cfg.dropout);
            let dec = MlpSpec::new(l, &rev, size)
                .with_batch_norm(cfg.batch_norm)
                .with_dropout(cfg.dropout);
            encoders.push(Mlp::new(&enc, &mut Rng::substream(seed, &[0xE1, g as u64]))?);
            decoders.push(Mlp::new(&dec, &mut Rng::substream(seed, &[0xD1, g as u64]))?);
        }
        let head = match &cfg.head {
            Some(h) => {
                check_dropout(h.dropout)?;
                if h.n_classes < 2 {
                    return Err(Error::invalid("classifier head needs at least 2 classes"));
                }
                let spec = MlpSpec::new(l, &h.hidden, h.n_classes)
                    .with_batch_norm(h.batch_norm)
                    .with_dropout(h.dropout);
                Some(Mlp::new(&spec, &mut Rng::substream(seed, &[0x4EAD]))?)
            }
            None => None,
        };
        Self::from_parts(
            grouping,
            l,
            encoders,
            decoders,
            head,
            cfg.beta,
            cfg.include_prior,
            cfg.elbo_mode.unwrap_or(ElboMode::default_for(cfg.n_groups)),
        )
    }

    /// Assembles a model from explicit networks after checking their widths.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        grouping: FeatureGrouping,
        latent_dim: usize,
        encoders: Vec<Mlp>,
        decoders: Vec<Mlp>,
        head: Option<Mlp>,
        beta: f64,
        include_prior: bool,
        elbo_mode: ElboMode,
    ) -> Result<Self> {
        let m = grouping.n_groups();
        elbo_mode.validate(m)?;
        if !(beta >= 0.0) || !beta.is_finite() {
            return Err(Error::invalid(format!("beta {beta} must be finite and >= 0")));
        }
        if encoders.len() != m || decoders.len() != m {
            return Err(Error::shape(format!(
                "{} encoders and {} decoders for {m} groups",
                encoders.len(),
                decoders.len()
            )));
        }
        for (g, size) in grouping.sizes().into_iter().enumerate() {
            let (e, d) = (&encoders[g], &decoders[g]);
            if e.input_dim() != size || e.output_dim() != 2 * latent_dim {
                return Err(Error::shape(format!(
                    "encoder {g} maps {} -> {}, expected {size} -> {}",
                    e.input_dim(),
                    e.output_dim(),
                    2 * latent_dim
                )));
            }
            if d.input_dim() != latent_dim || d.output_dim() != size {
                return Err(Error::shape(format!(
                    "decoder {g} maps {} -> {}, expected {latent_dim} -> {size}",
                    d.input_dim(),
                    d.output_dim()
                )));
            }
        }
        if let Some(h) = &head {
            if h.input_dim() != latent_dim {
                return Err(Error::shape("classifier head input differs from latent width"));
            }
        }
        Ok(Self {
            grouping,
            latent_dim,
            encoders,
            decoders,
            head,
            beta,
            include_prior,
            elbo_mode,
        })
    }

    pub fn grouping(&self) -> &FeatureGrouping {
        &self.grouping
    }

    pub fn n_groups(&self) -> usize {
        self.grouping.n_groups()
    }

    pub fn n_features(&self) -> usize {
        self.grouping.n_features()
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn include_prior(&self) -> bool {
        self.include_prior
    }

    pub fn set_include_prior(&mut self, on: bool) {
        self.include_prior = on;
    }

    pub fn elbo_mode(&self) -> ElboMode {
        self.elbo_mode
    }

    pub fn set_elbo_mode(&mut self, mode: ElboMode) -> Result<()> {
        mode.validate(self.n_groups())?;
        self.elbo_mode = mode;
        Ok(())
    }

    pub fn encoders(&self) -> &[Mlp] {
        &self.encoders
    }

    pub fn decoders(&self) -> &[Mlp] {
        &self.decoders
    }

    pub fn head(&self) -> Option<&Mlp> {
        self.head.as_ref()
    }

    pub fn n_classes(&self) -> Option<usize> {
        self.head.as_ref().map(Mlp::output_dim)
    }

    /// Weights and biases of all encoders and decoders.
    pub fn expert_weight_count(&self) -> usize {
        self.encoders
            .iter()
            .chain(&self.decoders)
            .flat_map(|m| m.layers())
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Encoders, then decoders, then the head; each in [`Mlp::params_mut`] order.
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for net in self
            .encoders
            .iter_mut()
            .chain(self.decoders.iter_mut())
            .chain(self.head.iter_mut())
        {
            out.extend(net.params_mut());
        }
        out
    }

    pub fn param_lengths(&self) -> Vec<usize> {
        self.encoders
            .iter()
            .chain(&self.decoders)
            .chain(&self.head)
            .flat_map(Mlp::param_lengths)
            .collect()
    }

    fn check_columns(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.n_features() {
            return Err(Error::shape(format!(
                "model expects {} features, got {}",
                self.n_features(),
                x.cols()
            )));
        }
        if x.rows() == 0 {
            return Err(Error::shape("empty batch"));
        }
        Ok(())
    }

    /// Eval-mode posterior of every group.
    pub fn encode_groups(&self, x: &Matrix) -> Result<Vec<GaussianBatch>> {
        self.check_columns(x)?;
        (0..self.n_groups()).map(|g| self.encode_group(x, g)).collect()
    }

    /// Eval-mode posterior of group `g`; only that group's columns are read.
    pub fn encode_group(&self, x: &Matrix, g: usize) -> Result<GaussianBatch> {
        let out = self.encoders[g].forward_eval(&self.grouping.slice(x, g))?;
        GaussianBatch::from_encoder_output(&out, self.latent_dim)
    }

    /// Eval-mode reconstruction of all `D` features from latent codes.
    pub fn decode_all(&self, z: &Matrix) -> Result<Matrix> {
        if z.cols() != self.latent_dim {
            return Err(Error::shape(format!(
                "latent codes have {} columns, expected {}",
                z.cols(),
                self.latent_dim
            )));
        }
        let blocks = self
            .decoders
            .iter()
            .map(|d| d.forward_eval(z))
            .collect::<Result<Vec<_>>>()?;
        self.grouping.scatter(&blocks)
    }

    /// Posterior from the groups in `available` only; masked columns of `x`
    /// are never read.
    pub fn infer_latent(&self, x: &Matrix, available: GroupMask, reduction: LatentReduction) -> Result<GaussianBatch> {
        self.check_columns(x)?;
        let m = self.n_groups();
        if !available.is_subset_of(GroupMask::full(m)) {
            return Err(Error::invalid(format!(
                "mask {:#b} names groups beyond {m}",
                available.0
            )));
        }
        let l = self.latent_dim;
        if available.is_empty() {
            if !self.include_prior {
                return Err(Error::invalid(
                    "no groups available and the prior is disabled",
                ));
            }
            return Ok(GaussianBatch {
                mean: Matrix::zeros(x.rows(), l),
                log_var: Matrix::zeros(x.rows(), l),
            });
        }
        let mut posts: Vec<Option<GaussianBatch>> = vec![None; m];
        for g in available.groups() {
            posts[g] = Some(self.encode_group(x, g)?);
        }
        let pick = |mask: GroupMask| -> Vec<&GaussianBatch> {
            mask.groups().map(|g| posts[g].as_ref().expect("encoded")).collect()
        };
        match reduction {
            LatentReduction::PoeFull => fuse_batches(&pick(available), l, self.include_prior),
            LatentReduction::MixtureMean => {
                let subsets = available
                    .nonempty_subsets()
                    .into_iter()
                    .map(|a| fuse_batches(&pick(a), l, self.include_prior))
                    .collect::<Result<Vec<_>>>()?;
                let rows = (0..x.rows())
                    .map(|r| {
                        UniformMixture::new(subsets.iter().map(|s| s.row(r)).collect())
                            .map(|mix| mix.moment_match())
                    })
                    .collect::<Result<Vec<DiagGaussian>>>()?;
                GaussianBatch::from_rows(&rows)
            }
        }
    }

    /// Latent means with all groups available.
    pub fn latent_means(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self
            .infer_latent(x, GroupMask::full(self.n_groups()), LatentReduction::PoeFull)?
            .mean)
    }

    /// Eval-mode logits from the full-set posterior mean.
    pub fn supervised_forward(&self, x: &Matrix) -> Result<(Matrix, GaussianBatch)> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| Error::invalid("model has no classifier head"))?;
        let latent = self.infer_latent(x, GroupMask::full(self.n_groups()), LatentReduction::PoeFull)?;
        Ok((head.forward_eval(&latent.mean)?, latent))
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.supervised_forward(x)?.0))
    }

    /// Objective on one batch: reconstruction from subsets of groups, `beta`
    /// times the subset-averaged KL, and cross-entropy of the head when
    /// `labels` are given.
    ///
    /// Draw order from `rng`: encoder dropout (group order), subset choice
    /// (mixture mode), reconstruction noise, decoder dropout, head noise,
    /// head dropout. Gradients are returned in train mode only.
    pub fn elbo_loss(
        &mut self,
        x: &Matrix,
        labels: Option<&[usize]>,
        beta: f64,
        rng: &mut Rng,
        mode: Mode,
    ) -> Result<(ElboTerms, Option<ModelGrads>)> {
        self.check_columns(x)?;
        if labels.is_some() && self.head.is_none() {
            return Err(Error::invalid("labels given but the model has no classifier head"));
        }
        if let Some(y) = labels {
            if y.len() != x.rows() {
                return Err(Error::shape(format!("{} labels for {} rows", y.len(), x.rows())));
            }
        }
        let train = mode == Mode::Train;
        let b = x.rows();
        let m = self.n_groups();
        let l = self.latent_dim;

        let mut enc_out = Vec::with_capacity(m);
        let mut enc_cache: Vec<MlpCache> = Vec::with_capacity(m);
        for g in 0..m {
            let xg = self.grouping.slice(x, g);
            if train {
                let (o, c) = self.encoders[g].forward_train(&xg, rng)?;
                enc_out.push(o);
                enc_cache.push(c);
            } else {
                enc_out.push(self.encoders[g].forward_eval(&xg)?);
            }
        }
        let experts = Experts::from_outputs(&enc_out, l)?;

        let full = GroupMask::full(m);
        let all_terms = || -> Vec<(usize, GroupMask)> {
            full.nonempty_subsets()
                .into_iter()
                .flat_map(|a| (0..b).map(move |r| (r, a)))
                .collect()
        };
        let recon_terms = match self.elbo_mode {
            ElboMode::FullEnumeration => all_terms(),
            ElboMode::MixtureSample { samples } => {
                let k = (1usize << m) - 1;
                (0..samples * b)
                    .map(|t| (t % b, GroupMask(rng.below(k) as u32 + 1)))
                    .collect()
            }
        };
        let kl_shared = self.elbo_mode == ElboMode::FullEnumeration || m > MAX_ENUMERATED_GROUPS;
        let recon = Fused::compute(&experts, recon_terms, l, self.include_prior);
        let kl_fused = (!kl_shared).then(|| Fused::compute(&experts, all_terms(), l, self.include_prior));
        let n = recon.len();

        let eps = rng.normals(n * l);
        let z = Matrix::from_vec(n, l, recon.sample(&eps))?;
        let targets: Vec<Matrix> = (0..m)
            .map(|g| self.grouping.slice(x, g).select_rows(&recon.rows))
            .collect();
        let mut term_sq = vec![0.0; n];
        let mut dec_cache = Vec::with_capacity(m);
        let mut dec_grad_out = Vec::with_capacity(m);
        for g in 0..m {
            let xhat = if train {
                let (o, c) = self.decoders[g].forward_train(&z, rng)?;
                dec_cache.push(c);
                o
            } else {
                self.decoders[g].forward_eval(&z)?
            };
            let mut grad = xhat;
            for t in 0..n {
                let target = targets[g].row(t);
                let row = grad.row_mut(t);
                for (v, y) in row.iter_mut().zip(target) {
                    let diff = *v - y;
                    term_sq[t] += diff * diff;
                    *v = 2.0 * diff / n as f64;
                }
            }
            dec_grad_out.push(grad);
        }
        if let Some(t) = term_sq.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!(
                "reconstruction from subset {:#b} (term {t})",
                recon.masks[t].0
            )));
        }
        let recon_loss = term_sq.iter().sum::<f64>() / n as f64;

        let kl_src = kl_fused.as_ref().unwrap_or(&recon);
        let n_kl = kl_src.len();
        let kl_terms: Vec<f64> = (0..n_kl).map(|t| kl_src.kl(t, l)).collect();
        if let Some(t) = kl_terms.iter().position(|v| !v.is_finite()) {
            return Err(Error::non_finite(format!("kl of subset {:#b}", kl_src.masks[t].0)));
        }
        let kl = kl_terms.iter().sum::<f64>() / n_kl as f64;

        let mut ce = None;
        let mut head_state = None;
        if let (Some(y), Some(head)) = (labels, self.head.as_mut()) {
            let sup = Fused::compute(&experts, (0..b).map(|r| (r, full)).collect(), l, self.include_prior);
            let (logits, cache, eps_h) = if train {
                let eps_h = rng.normals(b * l);
                let zh = Matrix::from_vec(b, l, sup.sample(&eps_h))?;
                let (o, c) = head.forward_train(&zh, rng)?;
                (o, Some(c), eps_h)
            } else {
                let mean = Matrix::from_vec(b, l, sup.mean.clone())?;
                (head.forward_eval(&mean)?, None, vec![])
            };
            let (value, grad) = softmax_cross_entropy(&logits, y)?;
            if !value.is_finite() {
                return Err(Error::non_finite("classifier cross-entropy"));
            }
            ce = Some(value);
            head_state = Some((sup, cache, eps_h, grad));
        }

        let loss = recon_loss + beta * kl + ce.unwrap_or(0.0);
        if !loss.is_finite() {
            return Err(Error::non_finite("elbo loss"));
        }
        let terms = ElboTerms {
            loss,
            recon: recon_loss,
            kl,
            ce,
        };
        if !train {
            return Ok((terms, None));
        }

        let mut gz = Matrix::zeros(n, l);
        let mut dec_grads = Vec::with_capacity(m);
        for g in 0..m {
            let (pg, gin) = self.decoders[g].backward(&dec_cache[g], &dec_grad_out[g])?;
            gz.add_assign(&gin)?;
            dec_grads.push(pg);
        }

        let mut g_mean = gz.into_vec();
        let mut g_lv: Vec<f64> = g_mean
            .iter()
            .zip(&eps)
            .zip(&recon.log_var)
            .map(|((g, e), lv)| g * e * 0.5 * (0.5 * lv).exp())
            .collect();
        let kl_w = beta / n_kl as f64;
        let add_kl = |f: &Fused, gm: &mut [f64], glv: &mut [f64]| {
            for k in 0..gm.len() {
                gm[k] += kl_w * f.mean[k];
                glv[k] += kl_w * 0.5 * (f.log_var[k].exp() - 1.0);
            }
        };
        let mut gm_e: Vec<Matrix> = (0..m).map(|_| Matrix::zeros(b, l)).collect();
        let mut glv_e: Vec<Matrix> = (0..m).map(|_| Matrix::zeros(b, l)).collect();
        match &kl_fused {
            None => add_kl(&recon, &mut g_mean, &mut g_lv),
            Some(f) => {
                let mut km = vec![0.0; f.mean.len()];
                let mut klv = vec![0.0; f.mean.len()];
                add_kl(f, &mut km, &mut klv);
                f.backward(&experts, &km, &klv, l, &mut gm_e, &mut glv_e);
            }
        }
        recon.backward(&experts, &g_mean, &g_lv, l, &mut gm_e, &mut glv_e);

        let mut head_grads = None;
        if let Some((sup, Some(cache), eps_h, grad)) = head_state {
            let head = self.head.as_ref().expect("head present");
            let (pg, gin) = head.backward(&cache, &grad)?;
            head_grads = Some(pg);
            let gm = gin.into_vec();
            let glv: Vec<f64> = gm
                .iter()
                .zip(&eps_h)
                .zip(&sup.log_var)
                .map(|((g, e), lv)| g * e * 0.5 * (0.5 * lv).exp())
                .collect();
            sup.backward(&experts, &gm, &glv, l, &mut gm_e, &mut glv_e);
        }

        let mut enc_grads = Vec::with_capacity(m);
        for g in 0..m {
            let mut glv = std::mem::replace(&mut glv_e[g], Matrix::zeros(0, 0));
            for (v, ok) in glv.data_mut().iter_mut().zip(&experts.in_range[g]) {
                if !ok {
                    *v = 0.0;
                }
            }
            let out_grad = Matrix::hstack(&gm_e[g], &glv)?;
            enc_grads.push(self.encoders[g].backward(&enc_cache[g], &out_grad)?.0);
        }
        Ok((
            terms,
            Some(ModelGrads {
                encoders: enc_grads,
                decoders: dec_grads,
                head: head_grads,
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::poe_combine;

    fn tiny(m: usize, d: usize, l: usize, prior: bool, mode: Option<ElboMode>) -> EnVae {
        let cfg = ModelConfig {
            latent_dim: l,
            n_groups: m,
            hidden: Some(vec![4]),
            dropout: 0.0,
            batch_norm: false,
            include_prior: prior,
            elbo_mode: mode,
            ..ModelConfig::default()
        };
        EnVae::new(d, &cfg, 11).unwrap()
    }

    fn data(b: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = Rng::new(seed);
        Matrix::from_vec(b, d, (0..b * d).map(|_| rng.uniform()).collect()).unwrap()
    }

    #[test]
    fn fuse_row_matches_poe_combine() {
        let a = DiagGaussian::new(vec![0.3, -1.0], vec![0.2, -3.0]).unwrap();
        let c = DiagGaussian::new(vec![1.5, 2.0], vec![-0.7, 1.1]).unwrap();
        let ga = GaussianBatch::from_rows(&[a.clone()]).unwrap();
        let gc = GaussianBatch::from_rows(&[c.clone()]).unwrap();
        for prior in [false, true] {
            let fused = fuse_batches(&[&ga, &gc], 2, prior).unwrap().row(0);
            assert_eq!(fused, poe_combine(2, &[&a, &c], prior).unwrap());
        }
    }

    #[test]
    fn subset_table_shape() {
        let model = tiny(3, 9, 2, true, None);
        let posts = model.encode_groups(&data(4, 9, 1)).unwrap();
        let s = subset_posteriors(&posts, GroupMask::full(3), true).unwrap();
        assert_eq!(s.len(), 7);
        let single = subset_posteriors(&posts, GroupMask::full(3), false).unwrap();
        assert_eq!(single.get(GroupMask::single(1)).unwrap(), &posts[1]);
        assert!(subset_posteriors(&posts, GroupMask::EMPTY, true).is_err());
        assert_eq!(joint_posterior(&s, 0).unwrap().len(), 7);
    }

    #[test]
    fn beta_zero_is_pure_reconstruction() {
        let mut model = tiny(2, 6, 2, true, None);
        let x = data(5, 6, 2);
        let (t, _) = model.elbo_loss(&x, None, 0.0, &mut Rng::new(3), Mode::Train).unwrap();
        assert_eq!(t.loss, t.recon);
        assert!(t.kl > 0.0);
    }

    fn fd_check(mut model: EnVae, x: &Matrix, labels: Option<&[usize]>, beta: f64) {
        let (_, grads) = model.elbo_loss(x, labels, beta, &mut Rng::new(9), Mode::Train).unwrap();
        let grads = grads.unwrap();
        let analytic: Vec<f64> = grads.slices().concat();
        let lens = model.param_lengths();
        let h = 1e-5;
        let mut idx = 0;
        let mut worst: f64 = 0.0;
        for (p, &len) in lens.iter().enumerate() {
            for j in 0..len {
                let eval = |delta: f64| {
                    let mut m2 = model.clone();
                    m2.params_mut()[p][j] += delta;
                    m2.elbo_loss(x, labels, beta, &mut Rng::new(9), Mode::Train).unwrap().0.loss
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic[idx];
                let rel = (fd - a).abs() / (fd.abs() + a.abs()).max(1e-6);
                worst = worst.max(rel);
                idx += 1;
            }
        }
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn elbo_gradient_full_enumeration() {
        fd_check(tiny(2, 6, 2, true, None), &data(4, 6, 5), None, 0.7);
        fd_check(tiny(3, 7, 2, false, None), &data(3, 7, 6), None, 1.3);
    }

    #[test]
    fn elbo_gradient_mixture_sample() {
        let mode = Some(ElboMode::MixtureSample { samples: 2 });
        fd_check(tiny(3, 6, 2, true, mode), &data(4, 6, 7), None, 0.5);
    }

    #[test]
    fn elbo_gradient_supervised() {
        let cfg = ModelConfig {
            latent_dim: 2,
            n_groups: 2,
            hidden: Some(vec![3]),
            dropout: 0.0,
            batch_norm: false,
            head: Some(HeadConfig {
                n_classes: 3,
                hidden: vec![4],
                dropout: 0.0,
                batch_norm: false,
            }),
            ..ModelConfig::default()
        };
        let model = EnVae::new(6, &cfg, 4).unwrap();
        fd_check(model, &data(4, 6, 8), Some(&[0, 2, 1, 2]), 0.9);
    }

    #[test]
    fn masked_groups_are_never_read() {
        let model = tiny(4, 12, 3, true, None);
        let x = data(3, 12, 1);
        let avail = GroupMask(0b0101);
        let mut y = x.clone();
        for g in [1, 3] {
            for &f in model.grouping().group(g) {
                for r in 0..3 {
                    y.set(r, f, 1e300 * (r as f64 - 1.0));
                }
            }
        }
        for red in [LatentReduction::PoeFull, LatentReduction::MixtureMean] {
            assert_eq!(
                model.infer_latent(&x, avail, red).unwrap(),
                model.infer_latent(&y, avail, red).unwrap()
            );
        }
    }

    #[test]
    fn empty_availability() {
        let mut model = tiny(2, 4, 2, true, None);
        let p = model.infer_latent(&data(2, 4, 0), GroupMask::EMPTY, LatentReduction::PoeFull).unwrap();
        assert!(p.mean.data().iter().chain(p.log_var.data()).all(|&v| v == 0.0));
        model.set_include_prior(false);
        assert!(model.infer_latent(&data(2, 4, 0), GroupMask::EMPTY, LatentReduction::PoeFull).is_err());
    }

    #[test]
    fn full_enumeration_rejected_above_eight() {
        let cfg = ModelConfig {
            n_groups: 9,
            elbo_mode: Some(ElboMode::FullEnumeration),
            hidden: Some(vec![4]),
            ..ModelConfig::default()
        };
        let err = EnVae::new(20, &cfg, 0).unwrap_err().to_string();
        assert!(err.contains("511"), "{err}");
    }

    #[test]
    fn loss_finite_for_all_group_counts() {
        for m in [1, 2, 4, 6, 8] {
            let cfg = ModelConfig {
                n_groups: m,
                latent_dim: 4,
                ..ModelConfig::default()
            };
            let mut model = EnVae::new(40, &cfg, m as u64).unwrap();
            let (t, g) = model
                .elbo_loss(&data(8, 40, 3), None, 1.0, &mut Rng::new(1), Mode::Train)
                .unwrap();
            assert!(t.loss.is_finite());
            assert!(g.unwrap().slices().iter().all(|s| s.iter().all(|v| v.is_finite())));
        }
    }
}
