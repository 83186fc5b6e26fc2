//! Residual fine-grained attention.
//!
//! Three pooled views of a feature tensor (channel, height, width) are each
//! passed through a shared-lane 1-D convolution, batch norm and a sigmoid.
//! The resulting gates are broadcast-summed to full `[C,H,W]` resolution and
//! squashed by a second sigmoid into the attention map `M`, which then
//! calibrates the input either as `X ⊙ M` or residually as `X + X ⊙ M`.
//!
//! Since every view gate lies in `(0, 1)`, the map `M` of the full three-view
//! module lies in `(σ(0), σ(3))`.

use rand::Rng;

use crate::error::{shape_err, Error, Result};
use crate::norm::{BatchMoments, BatchNorm, BnLayout, Mode};
use crate::tape::{same_shape, Tape, Var};
use crate::tensor::{self, BinaryOp, PoolView, Tensor};

pub const DEFAULT_KERNEL_SIZE: usize = 3;

fn view_index(v: PoolView) -> usize {
    match v {
        PoolView::Channel => 0,
        PoolView::Height => 1,
        PoolView::Width => 2,
    }
}

/// Non-empty subset of the three attention views.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewSet([bool; 3]);

impl ViewSet {
    pub const ALL: ViewSet = ViewSet([true; 3]);

    pub fn only(view: PoolView) -> Self {
        let mut set = [false; 3];
        set[view_index(view)] = true;
        ViewSet(set)
    }

    pub fn from_views(views: &[PoolView]) -> Result<Self> {
        let mut set = [false; 3];
        for &v in views {
            set[view_index(v)] = true;
        }
        let out = ViewSet(set);
        out.validate()?;
        Ok(out)
    }

    pub fn contains(&self, view: PoolView) -> bool {
        self.0[view_index(view)]
    }

    pub fn iter(&self) -> impl Iterator<Item = PoolView> + '_ {
        PoolView::ALL.into_iter().filter(|v| self.contains(*v))
    }

    fn validate(&self) -> Result<()> {
        if self.0.iter().any(|&b| b) {
            Ok(())
        } else {
            Err(Error::Config("at least one attention view must be enabled".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RfgaConfig {
    pub k: usize,
    pub residual: bool,
    pub views: ViewSet,
}

impl Default for RfgaConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_KERNEL_SIZE,
            residual: true,
            views: ViewSet::ALL,
        }
    }
}

impl RfgaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.k)));
        }
        self.views.validate()
    }
}

/// Learnable kernels and per-view batch-norm state for one feature shape.
#[derive(Debug, Clone, PartialEq)]
pub struct RfgaParams {
    /// Indexed channel, height, width.
    kernels: [Tensor; 3],
    norms: [BatchNorm; 3],
    dims: (usize, usize, usize),
}

/// Tape handles for the learnable parts of [`RfgaParams`].
#[derive(Debug, Clone, Copy)]
pub struct RfgaVars {
    kernels: [Var; 3],
    gammas: [Var; 3],
    betas: [Var; 3],
}

impl RfgaVars {
    /// Same order as [`RfgaParams::parameters_mut`].
    pub fn all(&self) -> Vec<Var> {
        (0..3)
            .flat_map(|i| [self.kernels[i], self.gammas[i], self.betas[i]])
            .collect()
    }

    /// Inverse of [`RfgaVars::all`].
    pub fn from_slots(slots: &[Var]) -> Result<Self> {
        if slots.len() != 9 {
            return Err(Error::Contract(format!("expected 9 attention slots, got {}", slots.len())));
        }
        let pick = |j: usize| [slots[j], slots[3 + j], slots[6 + j]];
        Ok(Self {
            kernels: pick(0),
            gammas: pick(1),
            betas: pick(2),
        })
    }
}

/// Batch moments from each view's batch norm (train mode).
pub type RfgaMoments = [Option<BatchMoments>; 3];

impl RfgaParams {
    fn with_kernels(kernels: [Tensor; 3], channels: usize, height: usize, width: usize) -> Self {
        let norms = [
            BatchNorm::new(channels, BnLayout::PerFeature),
            BatchNorm::new(channels * height, BnLayout::PerFeature),
            BatchNorm::new(channels * width, BnLayout::PerFeature),
        ];
        Self {
            kernels,
            norms,
            dims: (channels, height, width),
        }
    }

    /// Kernels uniform in `[-1/√k, 1/√k]`, fresh batch norms.
    pub fn new<R: Rng>(k: usize, channels: usize, height: usize, width: usize, rng: &mut R) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        let bound = 1.0 / (k as f64).sqrt();
        let mut draw = || {
            Tensor::new(
                vec![k],
                (0..k).map(|_| rng.random_range(-bound..=bound)).collect(),
            )
        };
        Ok(Self::with_kernels([draw()?, draw()?, draw()?], channels, height, width))
    }

    /// All-zero kernels and fresh batch norms.
    pub fn zeroed(k: usize, channels: usize, height: usize, width: usize) -> Result<Self> {
        if k % 2 == 0 {
            return Err(Error::Config(format!("kernel size must be odd, got {k}")));
        }
        let z = Tensor::zeros(&[k]);
        Ok(Self::with_kernels([z.clone(), z.clone(), z], channels, height, width))
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn kernel_size(&self) -> usize {
        self.kernels[0].len()
    }

    pub fn kernel(&self, view: PoolView) -> &Tensor {
        &self.kernels[view_index(view)]
    }

    pub fn kernel_mut(&mut self, view: PoolView) -> &mut Tensor {
        &mut self.kernels[view_index(view)]
    }

    pub fn norm(&self, view: PoolView) -> &BatchNorm {
        &self.norms[view_index(view)]
    }

    pub fn norm_mut(&mut self, view: PoolView) -> &mut BatchNorm {
        &mut self.norms[view_index(view)]
    }

    pub fn bind(&self, tape: &mut Tape) -> RfgaVars {
        let kernels = self.kernels.clone().map(|k| tape.param(k));
        let gammas = self.norms.clone().map(|n| tape.param(n.gamma));
        let betas = self.norms.clone().map(|n| tape.param(n.beta));
        RfgaVars {
            kernels,
            gammas,
            betas,
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.kernels
            .iter_mut()
            .zip(self.norms.iter_mut())
            .flat_map(|(k, n)| [k, &mut n.gamma, &mut n.beta])
            .collect()
    }

    /// Learnable tensors and running statistics under stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for view in PoolView::ALL {
            let tag = view.name();
            let n = self.norm(view);
            out.push((format!("kernel_{tag}"), self.kernel(view)));
            out.push((format!("bn_{tag}.gamma"), &n.gamma));
            out.push((format!("bn_{tag}.beta"), &n.beta));
            out.push((format!("bn_{tag}.running_mean"), &n.running_mean));
            out.push((format!("bn_{tag}.running_var"), &n.running_var));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (view, (k, n)) in PoolView::ALL
            .into_iter()
            .zip(self.kernels.iter_mut().zip(self.norms.iter_mut()))
        {
            let tag = view.name();
            out.push((format!("kernel_{tag}"), k));
            out.push((format!("bn_{tag}.gamma"), &mut n.gamma));
            out.push((format!("bn_{tag}.beta"), &mut n.beta));
            out.push((format!("bn_{tag}.running_mean"), &mut n.running_mean));
            out.push((format!("bn_{tag}.running_var"), &mut n.running_var));
        }
        out
    }

    pub fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.norms.iter_mut()
    }

    pub fn absorb(&mut self, moments: &RfgaMoments) {
        for (n, m) in self.norms.iter_mut().zip(moments) {
            if let Some(m) = m {
                n.absorb(m);
            }
        }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (c, h, w) = self.dims;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return shape_err(format!(
                "attention expects [N,{c},{h},{w}] input, got {shape:?}"
            ));
        }
        Ok(())
    }

    /// Records one view's gate `σ(BN(conv1d(avg_pool(x))))` on the tape.
    pub fn attend_view_on_tape(
        &self,
        tape: &mut Tape,
        vars: &RfgaVars,
        x: Var,
        view: PoolView,
        mode: Mode,
    ) -> Result<(Var, Option<BatchMoments>)> {
        self.check_input(tape.shape(x))?;
        let i = view_index(view);
        let pooled = tape.avg_pool(x, view)?;
        let conv = tape.conv1d_shared(pooled, vars.kernels[i], view.conv_axis_batched())?;
        let bn = tape.batch_norm(conv, vars.gammas[i], vars.betas[i], &self.norms[i], mode)?;
        Ok((tape.sigmoid(bn.y), bn.moments))
    }

    /// Full module on a `[N,C,H,W]` batch.
    pub fn forward_on_tape(
        &self,
        config: &RfgaConfig,
        tape: &mut Tape,
        vars: &RfgaVars,
        x: Var,
        mode: Mode,
    ) -> Result<RfgaTrace> {
        config.validate()?;
        if config.k != self.kernel_size() {
            return Err(Error::Config(format!(
                "config kernel size {} but parameters use {}",
                config.k,
                self.kernel_size()
            )));
        }
        self.check_input(tape.shape(x))?;
        let mut z = [None; 3];
        let mut moments: RfgaMoments = [None, None, None];
        for view in config.views.iter() {
            let (gate, m) = self.attend_view_on_tape(tape, vars, x, view, mode)?;
            z[view_index(view)] = Some(gate);
            moments[view_index(view)] = m;
        }
        let full = tape.shape(x).to_vec();
        let m = expand_on_tape(tape, [z[1], z[2], z[0]], &full)?;
        let (attended, out) = calibrate_on_tape(tape, x, m, config.residual)?;
        Ok(RfgaTrace {
            z_channel: z[0],
            z_height: z[1],
            z_width: z[2],
            m,
            attended,
            out,
            moments,
        })
    }
}

/// Tape nodes produced by [`RfgaParams::forward_on_tape`].
#[derive(Debug)]
pub struct RfgaTrace {
    pub z_channel: Option<Var>,
    pub z_height: Option<Var>,
    pub z_width: Option<Var>,
    pub m: Var,
    /// `X ⊙ M`.
    pub attended: Var,
    pub out: Var,
    pub moments: RfgaMoments,
}

impl RfgaTrace {
    pub fn bundle(&self, tape: &Tape) -> AttentionBundle {
        let get = |v: Option<Var>| v.map(|v| tape.value(v).clone());
        AttentionBundle {
            z_h: get(self.z_height),
            z_w: get(self.z_width),
            z_c: get(self.z_channel),
            m: tape.value(self.m).clone(),
        }
    }
}

/// Broadcast sum of the enabled gates, padded to `full` and squashed.
fn expand_on_tape(tape: &mut Tape, gates: [Option<Var>; 3], full: &[usize]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for g in gates.into_iter().flatten() {
        acc = Some(match acc {
            None => g,
            Some(a) => tape.add(a, g)?,
        });
    }
    let mut sum = acc.ok_or_else(|| Error::Config("no attention view enabled".into()))?;
    if tape.shape(sum) != full {
        let zeros = tape.constant(Tensor::zeros(full));
        sum = tape.add(sum, zeros)?;
    }
    if tape.shape(sum) != full {
        return shape_err(format!(
            "attention gates expand to {:?}, features are {full:?}",
            tape.shape(sum)
        ));
    }
    Ok(tape.sigmoid(sum))
}

/// Returns `(X ⊙ M, calibrated)`.
fn calibrate_on_tape(tape: &mut Tape, x: Var, m: Var, residual: bool) -> Result<(Var, Var)> {
    same_shape(tape.shape(x), tape.shape(m), "calibrate")?;
    let attended = tape.hadamard(x, m)?;
    let out = if residual {
        tape.add(x, attended)?
    } else {
        attended
    };
    Ok((attended, out))
}

/// View gates and attention map. Batched tensors carry a leading `N` axis;
/// [`AttentionBundle::sample`] gives the per-image `[C,…]` form.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    pub z_h: Option<Tensor>,
    pub z_w: Option<Tensor>,
    pub z_c: Option<Tensor>,
    pub m: Tensor,
}

impl AttentionBundle {
    pub fn sample(&self, i: usize) -> Result<AttentionBundle> {
        let pick = |t: &Option<Tensor>| t.as_ref().map(|t| t.index_axis0(i)).transpose();
        Ok(AttentionBundle {
            z_h: pick(&self.z_h)?,
            z_w: pick(&self.z_w)?,
            z_c: pick(&self.z_c)?,
            m: self.m.index_axis0(i)?,
        })
    }
}

/// The three view gates of a `[N,C,H,W]` batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TripleView {
    pub z_h: Tensor,
    pub z_w: Tensor,
    pub z_c: Tensor,
    pub moments: RfgaMoments,
}

pub fn triple_view_attend(x: &Tensor, params: &RfgaParams, mode: Mode) -> Result<TripleView> {
    if x.rank() != 4 {
        return shape_err(format!("triple_view_attend expects rank 4, got {:?}", x.shape()));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let mut gates = Vec::with_capacity(3);
    let mut moments: RfgaMoments = [None, None, None];
    for view in [PoolView::Height, PoolView::Width, PoolView::Channel] {
        let (g, m) = params.attend_view_on_tape(&mut tape, &vars, xv, view, mode)?;
        gates.push(tape.value(g).clone());
        moments[view_index(view)] = m;
    }
    let z_c = gates.pop().expect("three gates");
    let z_w = gates.pop().expect("three gates");
    let z_h = gates.pop().expect("three gates");
    Ok(TripleView {
        z_h,
        z_w,
        z_c,
        moments,
    })
}

/// `M = σ(z_h ⊕ z_w ⊕ z_c)` broadcast to `out_shape`; absent views are
/// left out of the sum.
pub fn expand_outer_sum(
    z_h: Option<&Tensor>,
    z_w: Option<&Tensor>,
    z_c: Option<&Tensor>,
    out_shape: &[usize],
) -> Result<Tensor> {
    let r = out_shape.len();
    if r < 3 {
        return shape_err(format!("attention map must be at least [C,H,W], got {out_shape:?}"));
    }
    let (h, w) = (out_shape[r - 2], out_shape[r - 1]);
    let lead = &out_shape[..r - 2];
    for (gate, (eh, ew), name) in [
        (z_h, (h, 1), "z_h"),
        (z_w, (1, w), "z_w"),
        (z_c, (1, 1), "z_c"),
    ] {
        if let Some(g) = gate {
            let mut expect = lead.to_vec();
            expect.extend([eh, ew]);
            if g.shape() != expect.as_slice() {
                return shape_err(format!("{name} has shape {:?}, expected {expect:?}", g.shape()));
            }
        }
    }
    let mut sum = Tensor::zeros(out_shape);
    let mut any = false;
    for g in [z_h, z_w, z_c].into_iter().flatten() {
        sum = tensor::elementwise(&sum, g, BinaryOp::Add)?;
        any = true;
    }
    if !any {
        return Err(Error::Config("no attention view supplied".into()));
    }
    Ok(tensor::sigmoid(&sum))
}

/// `X ⊙ M`, or `X + X ⊙ M` when `residual`.
pub fn calibrate(x: &Tensor, m: &Tensor, residual: bool) -> Result<Tensor> {
    same_shape(x.shape(), m.shape(), "calibrate")?;
    let data = x
        .data()
        .iter()
        .zip(m.data())
        .map(|(&x, &m)| if residual { x + x * m } else { x * m })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Tape-free forward pass over a `[N,C,H,W]` batch.
pub fn rfga_forward(
    x: &Tensor,
    config: &RfgaConfig,
    params: &RfgaParams,
    mode: Mode,
) -> Result<(Tensor, AttentionBundle, RfgaMoments)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let xv = tape.constant(x.clone());
    let trace = params.forward_on_tape(config, &mut tape, &vars, xv, mode)?;
    let bundle = trace.bundle(&tape);
    Ok((tape.value(trace.out).clone(), bundle, trace.moments))
}

/// Channel mean of a `[C,H',W']` tensor, singleton spatial axes repeated to
/// `(height, width)`, min-max normalized to `[0,1]`. Constant maps give 0.5.
pub fn attention_summary(t: &Tensor, (height, width): (usize, usize)) -> Result<Tensor> {
    let [c, h, w] = *t.shape() else {
        return shape_err(format!("attention_summary expects [C,H,W], got {:?}", t.shape()));
    };
    if (h != 1 && h != height) || (w != 1 && w != width) {
        return shape_err(format!(
            "cannot repeat {:?} to {height}x{width}",
            t.shape()
        ));
    }
    let mean = Tensor::from_fn(&[height, width], |i| {
        let (y, x) = (if h == 1 { 0 } else { i[0] }, if w == 1 { 0 } else { i[1] });
        (0..c).map(|ch| t.at(&[ch, y, x])).sum::<f64>() / c as f64
    });
    let (lo, hi) = (mean.min(), mean.max());
    if hi - lo <= 0.0 {
        return Ok(Tensor::full(&[height, width], 0.5));
    }
    Ok(mean.map(|v| (v - lo) / (hi - lo)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn even_kernel_is_rejected() {
        assert!(RfgaParams::zeroed(4, 2, 2, 2).is_err());
        let cfg = RfgaConfig {
            k: 2,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn empty_view_set_is_rejected() {
        assert!(ViewSet::from_views(&[]).is_err());
    }

    #[test]
    fn zero_kernels_give_half_gates() {
        let p = RfgaParams::zeroed(3, 4, 3, 5).unwrap();
        let x = Tensor::from_fn(&[2, 4, 3, 5], |i| (i.iter().sum::<usize>() as f64).sin());
        let tv = triple_view_attend(&x, &p, Mode::Train).unwrap();
        for z in [&tv.z_h, &tv.z_w, &tv.z_c] {
            assert!(z.data().iter().all(|&v| v == 0.5));
        }
        assert_eq!(tv.z_h.shape(), &[2, 4, 3, 1]);
        assert_eq!(tv.z_w.shape(), &[2, 4, 1, 5]);
        assert_eq!(tv.z_c.shape(), &[2, 4, 1, 1]);
    }

    #[test]
    fn rank_and_batch_errors() {
        let p = RfgaParams::zeroed(3, 2, 2, 2).unwrap();
        assert!(matches!(
            triple_view_attend(&Tensor::ones(&[2, 2, 2]), &p, Mode::Eval),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            triple_view_attend(&Tensor::ones(&[1, 2, 2, 2]), &p, Mode::Train),
            Err(Error::BatchSize(_))
        ));
    }

    #[test]
    fn expand_rejects_mismatched_channels() {
        let zh = Tensor::ones(&[2, 3, 1]);
        let zc = Tensor::ones(&[3, 1, 1]);
        assert!(expand_outer_sum(Some(&zh), None, Some(&zc), &[2, 3, 4]).is_err());
    }

    #[test]
    fn calibrate_saturation_and_zero() {
        let x = Tensor::from_fn(&[2, 2, 2], |i| i[2] as f64 - 0.5);
        let y = calibrate(&x, &Tensor::ones(&[2, 2, 2]), true).unwrap();
        assert_eq!(y, x.scale(2.0));
        let z = Tensor::zeros(&[2, 2, 2]);
        let m = Tensor::full(&[2, 2, 2], 0.3);
        assert_eq!(calibrate(&z, &m, true).unwrap(), z);
        assert_eq!(calibrate(&z, &m, false).unwrap(), z);
        assert!(calibrate(&x, &Tensor::ones(&[2, 2, 1]), true).is_err());
    }

    #[test]
    fn summary_endpoints_and_constant() {
        let c = Tensor::full(&[3, 2, 2], 0.7);
        assert_eq!(attention_summary(&c, (2, 2)).unwrap(), Tensor::full(&[2, 2], 0.5));
        let one = Tensor::new(vec![1, 2, 2], vec![3.0, -1.0, 0.0, 5.0]).unwrap();
        let s = attention_summary(&one, (2, 2)).unwrap();
        assert_eq!(s.data(), &[4.0 / 6.0, 0.0, 1.0 / 6.0, 1.0]);
    }

    #[test]
    fn summary_hand_computed() {
        let t = Tensor::new(
            vec![3, 2, 2],
            vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 3.0, 1.0, 2.0, 1.0, 0.0, 4.0],
        )
        .unwrap();
        // channel means: [1, 1], [2, 3]
        let s = attention_summary(&t, (2, 2)).unwrap();
        let expect = [0.0, 0.0, 0.5, 1.0];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn summary_repeats_view_vectors() {
        let zh = Tensor::new(vec![2, 3, 1], vec![0.1, 0.2, 0.3, 0.3, 0.2, 0.1 + 0.4]).unwrap();
        let s = attention_summary(&zh, (3, 4)).unwrap();
        assert_eq!(s.shape(), &[3, 4]);
        for r in 0..3 {
            assert!((0..4).all(|c| s.at(&[r, c]) == s.at(&[r, 0])));
        }
    }
}
