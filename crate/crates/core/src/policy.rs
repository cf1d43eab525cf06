//! Neural control policy: a shared feature backbone feeding a perimeter
//! decoder and a routing decoder whose outputs are feasible by construction.

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::baselines::dijkstra_theta;
use crate::model::{Accumulation, ControlInput, RegionGraph};
use crate::{Error, Result};

pub const WEIGHTS_SCHEMA: &str = "nmfd-dpc-weights/1";

/// Which control channels the policy drives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControlMode {
    /// Perimeter control only; routing stays at the shortest-path default.
    #[serde(rename = "PC")]
    Pc,
    /// Perimeter control and routing guidance.
    #[default]
    #[serde(rename = "PCRG")]
    Pcrg,
}

impl ControlMode {
    pub fn routes(self) -> bool {
        self == ControlMode::Pcrg
    }
}

impl fmt::Display for ControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ControlMode::Pc => "PC",
            ControlMode::Pcrg => "PCRG",
        })
    }
}

impl FromStr for ControlMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "PC" => Ok(ControlMode::Pc),
            "PCRG" => Ok(ControlMode::Pcrg),
            _ => Err(Error::InvalidConfig(format!("unknown control mode {s:?}"))),
        }
    }
}

/// Limits on the perimeter-control ratios.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub u_lo: f64,
    pub u_hi: f64,
}

impl Default for ControlBounds {
    fn default() -> Self {
        Self {
            u_lo: 0.1,
            u_hi: 0.9,
        }
    }
}

impl ControlBounds {
    pub fn new(u_lo: f64, u_hi: f64) -> Result<Self> {
        let b = Self { u_lo, u_hi };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.u_lo && self.u_lo < self.u_hi && self.u_hi <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "control bounds must satisfy 0 <= lo < hi <= 1, got [{}, {}]",
                self.u_lo, self.u_hi
            )));
        }
        Ok(())
    }

    pub fn midpoint(&self) -> f64 {
        0.5 * (self.u_lo + self.u_hi)
    }
}

/// The three weight groups that can be frozen independently.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    Perimeter,
    Routing,
}

/// Fully connected layer `y = x W + b`, optionally followed by a
/// SoftExponential activation with a trainable `alpha`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    /// `[inputs, outputs]`
    pub weight: Tensor,
    /// `[1, outputs]`
    pub bias: Tensor,
    /// `[1]`, present on hidden layers.
    pub alpha: Option<Tensor>,
}

impl Dense {
    fn init(rng: &mut ChaCha8Rng, inputs: usize, outputs: usize, activated: bool) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut draw = |n: usize| {
            (0..n)
                .map(|_| rng.random_range(-bound..=bound))
                .collect::<Vec<_>>()
        };
        let weight = Tensor::new(vec![inputs, outputs], draw(inputs * outputs)).expect("shape");
        let bias = Tensor::new(vec![1, outputs], draw(outputs)).expect("shape");
        Self {
            weight,
            bias,
            alpha: activated.then(|| Tensor::scalar(0.0)),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[1]
    }
}

fn mlp(rng: &mut ChaCha8Rng, sizes: &[usize], activate_last: bool) -> Vec<Dense> {
    let n = sizes.len() - 1;
    (0..n)
        .map(|k| Dense::init(rng, sizes[k], sizes[k + 1], k + 1 < n || activate_last))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Feature and hidden width.
    pub width: usize,
    /// Hidden layers in the backbone.
    pub backbone_layers: usize,
    /// Hidden layers in each decoder before its output layer.
    pub decoder_layers: usize,
    pub mode: ControlMode,
    pub bounds: ControlBounds,
    /// Observations are divided by this many vehicles before the backbone.
    pub obs_scale: Option<f64>,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            width: 128,
            backbone_layers: 2,
            decoder_layers: 1,
            mode: ControlMode::Pcrg,
            bounds: ControlBounds::default(),
            obs_scale: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct BoundDense {
    weight: Var,
    bias: Var,
    alpha: Option<Var>,
}

/// Policy weights recorded on a tape, in the order of [`Policy::parameters`].
#[derive(Clone, Debug)]
pub struct BoundPolicy {
    backbone: Vec<BoundDense>,
    perimeter: Vec<BoundDense>,
    routing: Option<Vec<BoundDense>>,
    vars: Vec<(ParamGroup, Var)>,
}

impl BoundPolicy {
    /// Tape handles of every weight tensor, in canonical order.
    pub fn vars(&self) -> &[(ParamGroup, Var)] {
        &self.vars
    }
}

/// Tape outputs of one policy evaluation.
#[derive(Clone, Copy, Debug)]
pub struct PolicyOutput {
    /// `[B, R, R]`
    pub u: Var,
    /// `[B, R, R, R]`, absent in perimeter-only mode.
    pub theta: Option<Var>,
}

/// Topology-derived index tables shared by the decoders and the MPC baseline.
#[derive(Clone, Debug)]
pub struct DecoderLayout {
    regions: usize,
    pairs: Arc<Vec<usize>>,
    theta_mask: Vec<bool>,
}

impl DecoderLayout {
    pub fn new(graph: &RegionGraph) -> Self {
        let r = graph.regions();
        let pairs = graph
            .ordered_pairs()
            .into_iter()
            .map(|(i, h)| i * r + h)
            .collect();
        let theta_mask = (0..r * r * r)
            .map(|k| graph.adjacent(k / (r * r), (k / r) % r))
            .collect();
        Self {
            regions: r,
            pairs: Arc::new(pairs),
            theta_mask,
        }
    }

    pub fn regions(&self) -> usize {
        self.regions
    }

    /// Number of perimeter logits, one per ordered adjacent pair.
    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    /// Number of routing logits, one per `(i, h, j)`.
    pub fn triple_count(&self) -> usize {
        self.regions.pow(3)
    }

    /// Logits `[B, pairs]` to perimeter ratios `[B, R, R]` in `[u_lo, u_hi]`.
    /// Non-adjacent entries hold the midpoint and are ignored by the dynamics.
    pub fn decode_u(&self, tape: &mut Tape, logits: Var, bounds: ControlBounds) -> Result<Var> {
        let r = self.regions;
        let batch = tape.shape(logits)[0];
        if self.pairs.is_empty() {
            return Ok(tape.constant(Tensor::full(&[batch, r, r], bounds.midpoint())));
        }
        let s = tape.sigmoid(logits)?;
        let s = tape.scale(s, bounds.u_hi - bounds.u_lo)?;
        let s = tape.add_scalar(s, bounds.u_lo)?;
        let full = tape.scatter(s, self.pairs.clone(), r * r, bounds.midpoint())?;
        Ok(tape.reshape(full, &[batch, r, r])?)
    }

    /// Logits `[B, R^3]` to routing shares `[B, R, R, R]`: a softmax over the
    /// neighbours `h` of `i`, exactly zero elsewhere.
    pub fn decode_theta(&self, tape: &mut Tape, logits: Var) -> Result<Var> {
        let r = self.regions;
        let batch = tape.shape(logits)[0];
        if self.pairs.is_empty() {
            return Ok(tape.constant(Tensor::zeros(&[batch, r, r, r])));
        }
        let x = tape.reshape(logits, &[batch, r, r, r])?;
        Ok(tape.masked_softmax(x, 2, &self.theta_mask)?)
    }
}

/// Backbone plus decoders for one fixed topology.
#[derive(Debug)]
pub struct Policy {
    mode: ControlMode,
    bounds: ControlBounds,
    obs_scale: Option<f64>,
    width: usize,
    topology_hash: String,
    layout: DecoderLayout,
    default_theta: Array3<f64>,
    backbone: Vec<Dense>,
    perimeter: Vec<Dense>,
    routing: Option<Vec<Dense>>,
    forward_passes: AtomicU64,
}

impl Clone for Policy {
    fn clone(&self) -> Self {
        Self {
            mode: self.mode,
            bounds: self.bounds,
            obs_scale: self.obs_scale,
            width: self.width,
            topology_hash: self.topology_hash.clone(),
            layout: self.layout.clone(),
            default_theta: self.default_theta.clone(),
            backbone: self.backbone.clone(),
            perimeter: self.perimeter.clone(),
            routing: self.routing.clone(),
            forward_passes: AtomicU64::new(self.forward_passes()),
        }
    }
}

impl Policy {
    /// Randomly initialised policy; uniform fan-in scaling, zero alphas.
    pub fn new(graph: &RegionGraph, config: &PolicyConfig) -> Result<Self> {
        config.bounds.validate()?;
        if config.width == 0 || config.backbone_layers == 0 {
            return Err(Error::InvalidConfig(
                "policy needs a backbone of nonzero width".into(),
            ));
        }
        if let Some(s) = config.obs_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::InvalidConfig(format!(
                    "observation scale must be positive, got {s}"
                )));
            }
        }
        let layout = DecoderLayout::new(graph);
        let r = graph.regions();
        let w = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

        let mut sizes = vec![r * r];
        sizes.extend(std::iter::repeat_n(w, config.backbone_layers));
        let backbone = mlp(&mut rng, &sizes, true);

        let decoder = |rng: &mut ChaCha8Rng, out: usize| {
            let mut sizes = vec![w];
            sizes.extend(std::iter::repeat_n(w, config.decoder_layers));
            sizes.push(out);
            mlp(rng, &sizes, false)
        };
        let perimeter = decoder(&mut rng, layout.pair_count());
        let routing = config
            .mode
            .routes()
            .then(|| decoder(&mut rng, layout.triple_count()));

        Ok(Self {
            mode: config.mode,
            bounds: config.bounds,
            obs_scale: config.obs_scale,
            width: w,
            topology_hash: graph.topology_hash(),
            default_theta: dijkstra_theta(graph)?,
            layout,
            backbone,
            perimeter,
            routing,
            forward_passes: AtomicU64::new(0),
        })
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn bounds(&self) -> ControlBounds {
        self.bounds
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn regions(&self) -> usize {
        self.layout.regions
    }

    pub fn obs_scale(&self) -> Option<f64> {
        self.obs_scale
    }

    pub fn topology_hash(&self) -> &str {
        &self.topology_hash
    }

    pub fn layout(&self) -> &DecoderLayout {
        &self.layout
    }

    /// Shortest-path routing used whenever the policy does not route.
    pub fn default_theta(&self) -> &Array3<f64> {
        &self.default_theta
    }

    /// Number of forward passes evaluated so far, on any tape.
    pub fn forward_passes(&self) -> u64 {
        self.forward_passes.load(Ordering::Relaxed)
    }

    pub fn ensure_topology(&self, graph: &RegionGraph) -> Result<()> {
        let found = graph.topology_hash();
        if found != self.topology_hash {
            return Err(Error::TopologyMismatch {
                expected: self.topology_hash.clone(),
                found,
            });
        }
        Ok(())
    }

    fn groups(&self) -> impl Iterator<Item = (ParamGroup, &Vec<Dense>)> {
        [
            Some((ParamGroup::Backbone, &self.backbone)),
            Some((ParamGroup::Perimeter, &self.perimeter)),
            self.routing.as_ref().map(|r| (ParamGroup::Routing, r)),
        ]
        .into_iter()
        .flatten()
    }

    /// Every weight tensor in canonical order: group by group, and within a
    /// layer weight, bias, alpha.
    pub fn parameters(&self) -> Vec<(ParamGroup, &Tensor)> {
        let mut out = Vec::new();
        for (group, layers) in self.groups() {
            for l in layers {
                out.push((group, &l.weight));
                out.push((group, &l.bias));
                if let Some(a) = &l.alpha {
                    out.push((group, a));
                }
            }
        }
        out
    }

    /// Mutable view of [`Policy::parameters`], same order.
    pub fn parameters_mut(&mut self) -> Vec<(ParamGroup, &mut Tensor)> {
        let mut out = Vec::new();
        let groups = [
            Some((ParamGroup::Backbone, &mut self.backbone)),
            Some((ParamGroup::Perimeter, &mut self.perimeter)),
            self.routing.as_mut().map(|r| (ParamGroup::Routing, r)),
        ];
        for (group, layers) in groups.into_iter().flatten() {
            for l in layers.iter_mut() {
                out.push((group, &mut l.weight));
                out.push((group, &mut l.bias));
                if let Some(a) = &mut l.alpha {
                    out.push((group, a));
                }
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records the weights on `tape`; groups for which `trainable` is false
    /// become constants and receive no gradient.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamGroup) -> bool) -> BoundPolicy {
        let mut vars = Vec::new();
        let mut bind_layers = |group: ParamGroup, layers: &[Dense], tape: &mut Tape| {
            let learn = trainable(group);
            let mut leaf = |t: &Tensor, tape: &mut Tape| {
                let v = if learn {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                vars.push((group, v));
                v
            };
            layers
                .iter()
                .map(|l| {
                    let weight = leaf(&l.weight, tape);
                    let bias = leaf(&l.bias, tape);
                    let alpha = l.alpha.as_ref().map(|a| leaf(a, tape));
                    BoundDense {
                        weight,
                        bias,
                        alpha,
                    }
                })
                .collect::<Vec<_>>()
        };
        let backbone = bind_layers(ParamGroup::Backbone, &self.backbone, tape);
        let perimeter = bind_layers(ParamGroup::Perimeter, &self.perimeter, tape);
        let routing = self
            .routing
            .as_ref()
            .map(|r| bind_layers(ParamGroup::Routing, r, tape));
        BoundPolicy {
            backbone,
            perimeter,
            routing,
            vars,
        }
    }

    fn run_layers(tape: &mut Tape, layers: &[BoundDense], mut x: Var) -> Result<Var> {
        for l in layers {
            let y = tape.matmul(x, l.weight)?;
            x = tape.add(y, l.bias)?;
            if let Some(a) = l.alpha {
                x = tape.soft_exponential(a, x)?;
            }
        }
        Ok(x)
    }

    /// Feature vectors `[B, width]` for observations `[B, R * R]`.
    pub fn backbone(&self, tape: &mut Tape, bound: &BoundPolicy, obs: Var) -> Result<Var> {
        let x = match self.obs_scale {
            Some(s) => tape.scale(obs, 1.0 / s)?,
            None => obs,
        };
        Self::run_layers(tape, &bound.backbone, x)
    }

    /// One policy evaluation for a batch of observations `[B, R * R]`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundPolicy, obs: Var) -> Result<PolicyOutput> {
        self.forward_passes.fetch_add(1, Ordering::Relaxed);
        let features = self.backbone(tape, bound, obs)?;
        let u = if self.layout.pair_count() == 0 {
            self.layout.decode_u(tape, features, self.bounds)?
        } else {
            let logits = Self::run_layers(tape, &bound.perimeter, features)?;
            self.layout.decode_u(tape, logits, self.bounds)?
        };
        let theta = match &bound.routing {
            Some(layers) => {
                let logits = Self::run_layers(tape, layers, features)?;
                Some(self.layout.decode_theta(tape, logits)?)
            }
            None => None,
        };
        Ok(PolicyOutput { u, theta })
    }

    /// Control for a single observation, evaluated without gradients.
    pub fn act(&self, obs: &Accumulation) -> Result<ControlInput> {
        let r = self.regions();
        if obs.dim() != (r, r) {
            return Err(Error::InvalidConfig(format!(
                "observation is {:?}, policy expects {r}x{r}",
                obs.dim()
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::new(vec![1, r * r], obs.iter().copied().collect())?);
        let out = self.forward(&mut tape, &bound, x)?;
        let u = Array2::from_shape_vec((r, r), tape.value(out.u).data().to_vec()).expect("shape");
        let theta = match out.theta {
            Some(t) => {
                Array3::from_shape_vec((r, r, r), tape.value(t).data().to_vec()).expect("shape")
            }
            None => self.default_theta.clone(),
        };
        Ok(ControlInput { u, theta })
    }

    /// Serialises weights and metadata as JSON.
    pub fn to_json(&self) -> Result<String> {
        let record = |layers: &Vec<Dense>| layers.iter().map(LayerRecord::from).collect();
        let file = WeightsFile {
            schema: WEIGHTS_SCHEMA.into(),
            mode: self.mode,
            regions: self.regions(),
            topology_hash: self.topology_hash.clone(),
            bounds: self.bounds,
            width: self.width,
            obs_scale: self.obs_scale,
            backbone: record(&self.backbone),
            perimeter: record(&self.perimeter),
            routing: self.routing.as_ref().map(record),
        };
        serde_json::to_string(&file).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Loads weights for `graph`, rejecting files trained on another topology.
    pub fn from_json(text: &str, graph: &RegionGraph) -> Result<Self> {
        let file: WeightsFile =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        if file.schema != WEIGHTS_SCHEMA {
            return Err(Error::Parse(format!(
                "unsupported weights schema {:?}",
                file.schema
            )));
        }
        let found = graph.topology_hash();
        if file.topology_hash != found || file.regions != graph.regions() {
            return Err(Error::TopologyMismatch {
                expected: file.topology_hash,
                found,
            });
        }
        file.bounds.validate()?;
        let layout = DecoderLayout::new(graph);
        let r = graph.regions();
        let load = |records: Vec<LayerRecord>,
                    inputs: usize,
                    outputs: usize,
                    name: &str|
         -> Result<Vec<Dense>> {
            let layers = records
                .into_iter()
                .map(Dense::try_from)
                .collect::<Result<Vec<_>>>()?;
            let chained = layers.windows(2).all(|w| w[0].outputs() == w[1].inputs());
            let ends = layers.first().map(Dense::inputs) == Some(inputs)
                && layers.last().map(Dense::outputs) == Some(outputs);
            if !chained || !ends {
                return Err(Error::Parse(format!(
                    "{name} layer shapes do not fit {r} regions"
                )));
            }
            Ok(layers)
        };
        let backbone = load(file.backbone, r * r, file.width, "backbone")?;
        let perimeter = load(
            file.perimeter,
            file.width,
            layout.pair_count(),
            "perimeter decoder",
        )?;
        let routing = match (file.mode, file.routing) {
            (ControlMode::Pcrg, Some(rt)) => Some(load(
                rt,
                file.width,
                layout.triple_count(),
                "routing decoder",
            )?),
            (ControlMode::Pcrg, None) => {
                return Err(Error::Parse("routing decoder missing".into()))
            }
            (ControlMode::Pc, Some(_)) => {
                return Err(Error::Parse(
                    "perimeter-only weights carry a routing decoder".into(),
                ))
            }
            (ControlMode::Pc, None) => None,
        };
        Ok(Self {
            mode: file.mode,
            bounds: file.bounds,
            obs_scale: file.obs_scale,
            width: file.width,
            topology_hash: file.topology_hash,
            default_theta: dijkstra_theta(graph)?,
            layout,
            backbone,
            perimeter,
            routing,
            forward_passes: AtomicU64::new(0),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsFile {
    schema: String,
    mode: ControlMode,
    regions: usize,
    topology_hash: String,
    bounds: ControlBounds,
    width: usize,
    obs_scale: Option<f64>,
    backbone: Vec<LayerRecord>,
    perimeter: Vec<LayerRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    routing: Option<Vec<LayerRecord>>,
}

#[derive(Serialize, Deserialize)]
struct LayerRecord {
    inputs: usize,
    outputs: usize,
    alpha: Option<f64>,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl From<&Dense> for LayerRecord {
    fn from(d: &Dense) -> Self {
        Self {
            inputs: d.inputs(),
            outputs: d.outputs(),
            alpha: d.alpha.as_ref().map(Tensor::item),
            weight: d.weight.data().to_vec(),
            bias: d.bias.data().to_vec(),
        }
    }
}

impl TryFrom<LayerRecord> for Dense {
    type Error = Error;

    fn try_from(r: LayerRecord) -> Result<Self> {
        let all_finite = r
            .weight
            .iter()
            .chain(&r.bias)
            .chain(r.alpha.iter())
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::Parse("non-finite weight".into()));
        }
        let bad = |e| Error::Parse(format!("layer {}x{}: {e}", r.inputs, r.outputs));
        Ok(Dense {
            weight: Tensor::new(vec![r.inputs, r.outputs], r.weight).map_err(bad)?,
            bias: Tensor::new(vec![1, r.outputs], r.bias).map_err(bad)?,
            alpha: r.alpha.map(Tensor::scalar),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mfd;

    fn triangle() -> RegionGraph {
        RegionGraph::new(3, &[(0, 1), (1, 2), (0, 2)], vec![Mfd::BENCHMARK; 3]).unwrap()
    }

    fn small(mode: ControlMode) -> PolicyConfig {
        PolicyConfig {
            width: 8,
            mode,
            seed: 3,
            ..PolicyConfig::default()
        }
    }

    #[test]
    fn zero_logits_give_midpoint() {
        let g = triangle();
        let layout = DecoderLayout::new(&g);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[1, layout.pair_count()]));
        let u = layout
            .decode_u(&mut tape, logits, ControlBounds::default())
            .unwrap();
        assert!(tape
            .value(u)
            .data()
            .iter()
            .all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn saturated_logits_reach_upper_bound() {
        let g = triangle();
        let layout = DecoderLayout::new(&g);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::full(&[1, layout.pair_count()], 60.0));
        let u = layout
            .decode_u(&mut tape, logits, ControlBounds::default())
            .unwrap();
        let v = tape.value(u).data();
        assert_eq!(v[1], 0.9);
        assert_eq!(v[0], 0.5);
    }

    #[test]
    fn equal_logits_split_evenly_and_mask_is_exact() {
        let g = RegionGraph::new(3, &[(0, 1), (1, 2)], vec![Mfd::BENCHMARK; 3]).unwrap();
        let layout = DecoderLayout::new(&g);
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::full(&[1, 27], 0.3));
        let th = layout.decode_theta(&mut tape, logits).unwrap();
        let v = tape.value(th).data();
        let at = |i: usize, h: usize, j: usize| v[(i * 3 + h) * 3 + j];
        assert_eq!(at(1, 0, 2), 0.5);
        assert_eq!(at(1, 2, 2), 0.5);
        assert_eq!(at(0, 2, 2), 0.0);
        assert_eq!(at(0, 1, 2), 1.0);
    }

    #[test]
    fn act_is_feasible_and_deterministic() {
        let g = triangle();
        let p = Policy::new(&g, &small(ControlMode::Pcrg)).unwrap();
        let obs = Array2::from_elem((3, 3), 200.0);
        let a = p.act(&obs).unwrap();
        let b = p.act(&obs).unwrap();
        assert_eq!(a, b);
        assert!(a.is_feasible(&g, 0.1, 0.9, 1e-12));
        assert_eq!(p.forward_passes(), 2);
    }

    #[test]
    fn perimeter_mode_uses_shortest_paths() {
        let g = triangle();
        let p = Policy::new(&g, &small(ControlMode::Pc)).unwrap();
        let c = p.act(&Array2::zeros((3, 3))).unwrap();
        assert_eq!(&c.theta, p.default_theta());
        assert!(p.to_json().unwrap().find("routing").is_none());
    }

    #[test]
    fn json_round_trip_and_topology_check() {
        let g = triangle();
        let p = Policy::new(&g, &small(ControlMode::Pcrg)).unwrap();
        let text = p.to_json().unwrap();
        let q = Policy::from_json(&text, &g).unwrap();
        assert_eq!(q.to_json().unwrap(), text);
        let other = RegionGraph::new(3, &[(0, 1), (1, 2)], vec![Mfd::BENCHMARK; 3]).unwrap();
        assert!(matches!(
            Policy::from_json(&text, &other),
            Err(Error::TopologyMismatch { .. })
        ));
    }

    #[test]
    fn frozen_groups_receive_no_gradient() {
        let g = triangle();
        let p = Policy::new(&g, &small(ControlMode::Pcrg)).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, |grp| grp != ParamGroup::Routing);
        let obs = tape.constant(Tensor::full(&[2, 9], 1.0));
        let out = p.forward(&mut tape, &bound, obs).unwrap();
        let s = tape.sum(out.u).unwrap();
        let th = tape.sum(out.theta.unwrap()).unwrap();
        let loss = tape.add(s, th).unwrap();
        let grads = tape.backward(loss).unwrap();
        for &(grp, v) in bound.vars() {
            assert_eq!(
                grads.get(v).is_some(),
                grp != ParamGroup::Routing,
                "{grp:?}"
            );
        }
    }
}
