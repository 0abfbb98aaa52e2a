//! Finite-difference checks of every trained quantity on small random models.

use crate::amse::{AmseModel, EmbedKind, MarginConfig, MarginMode};
use crate::autos2v::{build_adjacency, Arch, ArchParams, S2vModel, S2vShape};
use crate::error::Result;
use crate::numerics::{grad_check_many, Rng, Tape, Tensor, Var};
use crate::params::Parameters;
use crate::trainer::{overall_loss_on, Dvbe, TrainConfig};

pub const TARGETS: [&str; 6] = ["ams_loss", "s2v_loss", "cet_loss", "overall_loss", "embed", "embed_semantic"];

#[derive(Clone, Debug, PartialEq)]
pub struct GradResult {
    pub target: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

struct Fixture {
    models: Dvbe,
    xs: Vec<Tensor>,
    labels: Vec<u32>,
    attributes: Tensor,
    probe_f: Tensor,
    probe_g: Tensor,
}

const SEEN: [u32; 3] = [0, 1, 2];
const ALL: [u32; 5] = [0, 1, 2, 3, 4];

fn fixture(seed: u64) -> Result<Fixture> {
    let mut rng = Rng::new(seed);
    let (c, d, e, a) = (6, 3, 5, 4);
    let mut amse = AmseModel::init(EmbedKind::CrossAttentive, c, d, SEEN.to_vec(), true, &mut rng)?;
    // Positive biases keep every relu row alive, so no normalized row is zero.
    amse.reduce1_b = Tensor::full(&[d], 0.5);
    amse.reduce2_b = Tensor::full(&[d], 0.5);
    let attributes = rng.uniform_tensor(&[ALL.len(), a], 0.1, 1.0);
    let adjacency = build_adjacency(&attributes, 2)?;
    let arch = Arch::Continuous(ArchParams::random(2, 0.5, &mut rng));
    let shape = S2vShape { channels: c, attr_dim: a, embed_dim: e };
    let mut s2v = S2vModel::init(&shape, ALL.to_vec(), adjacency, arch, &mut rng)?;
    s2v.fv_b = Tensor::full(&[e], 0.5);
    for w in s2v.edges.values_mut() {
        w.fc_b = Tensor::full(&[e], 0.5);
    }
    let xs = (0..3).map(|_| rng.normal_tensor(&[2, 2, c], 1.0)).collect();
    Ok(Fixture {
        models: Dvbe { amse, s2v },
        xs,
        labels: vec![0, 2, 1],
        attributes,
        probe_f: rng.normal_tensor(&[1, d * d], 1.0),
        probe_g: rng.normal_tensor(&[ALL.len(), e], 1.0),
    })
}

fn check(target: &'static str, seed: u64, step: f64) -> Result<f64> {
    let fx = fixture(seed)?;
    let Fixture { models, xs, labels, attributes, probe_f, probe_g } = &fx;
    let (amse, s2v) = (&models.amse, &models.s2v);
    let refs: Vec<&Tensor> = xs.iter().collect();
    let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let margin = MarginConfig { mode: MarginMode::Adaptive, ..Default::default() };
    let config = TrainConfig { margin, ..Default::default() };
    let amse_params: Vec<Tensor> = amse.params().into_iter().map(|(_, t)| t.clone()).collect();
    let s2v_params = s2v.all_tensors();

    // λ is a constant of differentiation; freeze it at the base point.
    let lambdas = {
        let tape = Tape::new();
        let v = amse.bind(&tape);
        let f = amse.embed_batch_on(&tape, &v, &refs)?;
        amse.margins(&tape.value(amse.logits_on(&tape, &v, f)?), &targets, &margin)?
    };

    let s2v_pair = |tape: &Tape, leaves: &[Var]| -> Result<(Var, Var)> {
        let v = s2v.vars_from(tape, leaves);
        let visual = s2v.embed_visual_on(tape, &v, &refs)?;
        let semantic = s2v.embed_semantic_on(tape, &v, tape.leaf(attributes.clone()))?;
        Ok((visual, semantic))
    };

    match target {
        "ams_loss" => grad_check_many(
            |tape, leaves| {
                let v = AmseModel::vars_from(leaves);
                let f = amse.embed_batch_on(tape, &v, &refs)?;
                amse.margin_loss_on(tape, &v, f, &targets, &lambdas)
            },
            &amse_params,
            step,
        ),
        "s2v_loss" => grad_check_many(
            |tape, leaves| {
                let (visual, semantic) = s2v_pair(tape, leaves)?;
                s2v.s2v_loss_on(tape, visual, semantic, &targets)
            },
            &s2v_params,
            step,
        ),
        "cet_loss" => grad_check_many(
            |tape, leaves| {
                let (visual, semantic) = s2v_pair(tape, leaves)?;
                s2v.cet_loss_on(tape, visual, semantic, &[0, 1, 2], &targets, 0.1)
            },
            &s2v_params,
            step,
        ),
        "overall_loss" => {
            let n = amse_params.len();
            let all: Vec<Tensor> = amse_params.iter().chain(&s2v_params).cloned().collect();
            grad_check_many(
                |tape, leaves| {
                    let av = AmseModel::vars_from(&leaves[..n]);
                    let sv = s2v.vars_from(tape, &leaves[n..]);
                    let l = overall_loss_on(tape, models, &av, &sv, &refs, labels, attributes, &config, Some(&lambdas))?;
                    Ok(l.all)
                },
                &all,
                step,
            )
        }
        "embed" => grad_check_many(
            |tape, leaves| {
                let v = AmseModel::vars_from(leaves);
                let f = amse.embed_batch_on(tape, &v, &refs[..1])?;
                tape.sum_all(tape.hadamard(f, tape.leaf(probe_f.clone()))?)
            },
            &amse_params,
            step,
        ),
        "embed_semantic" => grad_check_many(
            |tape, leaves| {
                let (_, semantic) = s2v_pair(tape, leaves)?;
                tape.sum_all(tape.hadamard(semantic, tape.leaf(probe_g.clone()))?)
            },
            &s2v_params,
            step,
        ),
        other => unreachable!("unknown gradient target {other}"),
    }
}

/// Worst relative error of each target over `seeds` random fixtures.
pub fn run(seeds: u64, step: f64) -> Result<Vec<GradResult>> {
    let mut out = Vec::new();
    for target in TARGETS {
        for seed in 0..seeds {
            out.push(GradResult { target, seed, max_rel_error: check(target, seed, step)? });
        }
    }
    Ok(out)
}
