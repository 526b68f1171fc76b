//! Channel couplings and FLOPs / memory accounting.
//!
//! FLOPs are counted as multiply-accumulates of dense and conv layers, per
//! sample. Costs are always measured on the currently active structure:
//! channels whose gate is 0 neither produce nor consume anything.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{GatedModel, LayerSpec};

pub use crate::net::ChannelId;

/// Channels that must be kept or removed together.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CouplingGroup {
    /// Sorted ascending, never empty.
    pub members: Vec<ChannelId>,
}

impl CouplingGroup {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Smallest member; the group's tie-break key.
    pub fn key(&self) -> ChannelId {
        self.members[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCost {
    pub delta_flops: u64,
    pub delta_mem: u64,
}

/// Linear layers whose output channel `c` contributes to channel `c` of the
/// value produced by `layer`, following channel-preserving ops and residual sums.
fn channel_sources(model: &GatedModel, layer: usize) -> Result<Vec<usize>> {
    match &model.layers[layer] {
        LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => Ok(vec![layer]),
        LayerSpec::Relu | LayerSpec::AvgPool { .. } => {
            if layer == 0 {
                Err(Error::Graph("residual path reaches the network input".into()))
            } else {
                channel_sources(model, layer - 1)
            }
        }
        LayerSpec::Flatten => Err(Error::Graph(format!("residual path crosses flatten at layer {layer}"))),
        LayerSpec::ResidualAdd { from } => {
            let mut s = channel_sources(model, layer - 1)?;
            s.extend(channel_sources(model, *from)?);
            s.sort_unstable();
            s.dedup();
            Ok(s)
        }
    }
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Groups of gated channels tied together by residual additions.
///
/// Channel `c` of every linear layer feeding either operand of a residual sum
/// is merged (transitively) into one group; every other gated channel is a
/// singleton. Groups are sorted by their smallest member.
pub fn trace_couplings(model: &GatedModel) -> Result<Vec<CouplingGroup>> {
    model.validate()?;
    let ids = model.gate_ids();
    let index: BTreeMap<ChannelId, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut parent: Vec<usize> = (0..ids.len()).collect();
    for (i, layer) in model.layers.iter().enumerate() {
        let LayerSpec::ResidualAdd { .. } = layer else { continue };
        let sources = channel_sources(model, i)?;
        let gated: Vec<bool> = sources.iter().map(|&s| model.layers[s].is_gated()).collect();
        if gated.iter().any(|&g| g) && !gated.iter().all(|&g| g) {
            return Err(Error::Graph(format!("residual sum at layer {i} mixes gated and ungated channels")));
        }
        if !gated.iter().all(|&g| g) {
            continue;
        }
        let width = model.layers[sources[0]].out_channels().unwrap_or(0);
        for c in 0..width {
            let first = index[&ChannelId { layer: sources[0], channel: c }];
            for &s in &sources[1..] {
                let other = index[&ChannelId { layer: s, channel: c }];
                let (a, b) = (find(&mut parent, first), find(&mut parent, other));
                parent[a.max(b)] = a.min(b);
            }
        }
    }
    let mut groups: BTreeMap<usize, Vec<ChannelId>> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(id);
    }
    let mut out: Vec<CouplingGroup> = groups
        .into_values()
        .map(|mut members| {
            members.sort_unstable();
            CouplingGroup { members }
        })
        .collect();
    out.sort_unstable();
    Ok(out)
}

/// Per-layer activity of every output channel (features for vector outputs).
struct Activity {
    /// `outputs[i][c]`: channel `c` of layer `i`'s output carries signal.
    outputs: Vec<Vec<bool>>,
    input: Vec<bool>,
}

impl Activity {
    fn of(model: &GatedModel) -> Result<Self> {
        let shapes = model.layer_shapes()?;
        let input = vec![true; model.input_shape[0]];
        let mut outputs: Vec<Vec<bool>> = Vec::with_capacity(model.layers.len());
        for (i, layer) in model.layers.iter().enumerate() {
            let prev = if i == 0 { &input } else { &outputs[i - 1] };
            let act = match layer {
                LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => {
                    let n = layer.out_channels().unwrap_or(0);
                    match &model.gates[i] {
                        Some(g) => g.iter().map(|&v| v != 0.0).collect(),
                        None => vec![true; n],
                    }
                }
                LayerSpec::Relu | LayerSpec::AvgPool { .. } => prev.clone(),
                LayerSpec::Flatten => {
                    let before = if i == 0 { &model.input_shape } else { &shapes[i - 1] };
                    let per: usize = before[1..].iter().product();
                    prev.iter().flat_map(|&a| std::iter::repeat_n(a, per)).collect()
                }
                LayerSpec::ResidualAdd { from } => prev.iter().zip(&outputs[*from]).map(|(a, b)| *a || *b).collect(),
            };
            outputs.push(act);
        }
        Ok(Self { outputs, input })
    }

    fn input_of(&self, layer: usize) -> &[bool] {
        if layer == 0 {
            &self.input
        } else {
            &self.outputs[layer - 1]
        }
    }
}

fn count(flags: &[bool]) -> u64 {
    flags.iter().filter(|&&a| a).count() as u64
}

/// `(MACs per (input, output) channel pair, spatial output positions)` of a linear layer.
fn kernel_area_and_positions(layer: &LayerSpec, out_shape: &[usize]) -> (u64, u64) {
    match layer {
        LayerSpec::Conv2d { kernel, .. } => ((kernel * kernel) as u64, (out_shape[1] * out_shape[2]) as u64),
        _ => (1, 1),
    }
}

fn flops_and_params(model: &GatedModel, only_active: bool) -> Result<(u64, u64)> {
    let shapes = model.layer_shapes()?;
    let act = Activity::of(model)?;
    let (mut flops, mut params) = (0u64, 0u64);
    for (i, layer) in model.layers.iter().enumerate() {
        let Some(out) = layer.out_channels() else { continue };
        let (area, positions) = kernel_area_and_positions(layer, &shapes[i]);
        let (n_in, n_out) = if only_active {
            (count(act.input_of(i)), count(&act.outputs[i]))
        } else {
            (act.input_of(i).len() as u64, out as u64)
        };
        flops += n_in * n_out * area * positions;
        params += n_in * n_out * area + n_out;
    }
    Ok((flops, params))
}

/// Multiply-accumulates per sample over dense and conv layers.
pub fn model_flops(model: &GatedModel, only_active: bool) -> Result<u64> {
    Ok(flops_and_params(model, only_active)?.0)
}

/// Weight and bias count of dense and conv layers.
pub fn model_params(model: &GatedModel, only_active: bool) -> Result<u64> {
    Ok(flops_and_params(model, only_active)?.1)
}

/// The linear layer that reads `layer`'s output along the sequential path,
/// and how many of its input features one channel of `layer` occupies.
fn consumer(model: &GatedModel, layer: usize) -> Option<(usize, u64)> {
    let shapes = model.layer_shapes().ok()?;
    let mut per_channel = 1u64;
    for j in layer + 1..model.layers.len() {
        match &model.layers[j] {
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } => return Some((j, per_channel)),
            LayerSpec::Flatten => per_channel = shapes[j - 1][1..].iter().product::<usize>() as u64,
            _ => {}
        }
    }
    None
}

/// Cost of removing each currently active gated channel on its own.
///
/// `delta_flops` = producing filter MACs + consumer MACs reading the channel;
/// `delta_mem` = producing filter weights + bias + consumer weight slices +
/// one sample's activation map of the channel. Consumers reached only through
/// a residual shortcut are not charged to the shortcut source, so summing
/// over a coupling group counts every consumer once.
pub fn channel_costs(model: &GatedModel) -> Result<BTreeMap<ChannelId, ChannelCost>> {
    let shapes = model.layer_shapes()?;
    let act = Activity::of(model)?;
    let mut out = BTreeMap::new();
    for id in model.gate_ids() {
        if !act.outputs[id.layer][id.channel] {
            continue;
        }
        let layer = &model.layers[id.layer];
        let (area, positions) = kernel_area_and_positions(layer, &shapes[id.layer]);
        let n_in = count(act.input_of(id.layer));
        let mut flops = n_in * area * positions;
        let mut mem = n_in * area + 1 + positions;
        if let Some((j, per_channel)) = consumer(model, id.layer) {
            let (c_area, c_positions) = kernel_area_and_positions(&model.layers[j], &shapes[j]);
            let c_out = count(&act.outputs[j]);
            flops += per_channel * c_out * c_area * c_positions;
            mem += per_channel * c_out * c_area;
        }
        out.insert(id, ChannelCost { delta_flops: flops, delta_mem: mem });
    }
    Ok(out)
}

/// Summed member costs of a group.
pub fn group_cost(group: &CouplingGroup, costs: &BTreeMap<ChannelId, ChannelCost>) -> ChannelCost {
    group.members.iter().filter_map(|m| costs.get(m)).fold(ChannelCost { delta_flops: 0, delta_mem: 0 }, |a, c| {
        ChannelCost { delta_flops: a.delta_flops + c.delta_flops, delta_mem: a.delta_mem + c.delta_mem }
    })
}
