//! Reference architectures: per-task MLPs, a shared trunk with task towers,
//! and a mixture-of-experts with per-task softmax gates. All three consume
//! the same embedded features and emit one probability vector per task, so
//! the trainer and metrics treat them interchangeably with the main model.

use crate::features::{create_embeddings, create_embeddings_named, embed_lookup, DatasetSchema, FeatureBatch};
use crate::model::{
    affine, create_affine, create_mlp, create_tower, init_rng, mlp_forward, tower_forward,
    AffineHandles, ForwardCtx, Model, ModelError, ModelHyper, MlpHandles, TowerHandles,
};
use crate::numerics::{DiffTensor, Tape};
use crate::params::{ParamSet, TapeParams};

/// Independent model per task: own embeddings, own MLP. No sharing at all.
pub struct SingleTask {
    params: ParamSet,
    n_tasks: usize,
    d_f: usize,
    embeddings: Vec<Vec<usize>>,
    nets: Vec<MlpHandles>,
}

impl SingleTask {
    pub fn new(schema: &DatasetSchema, hyper: &ModelHyper, seed: u64) -> Result<Self, ModelError> {
        let n_tasks = schema.num_tasks();
        let d_f = hyper.embed_dim;
        let in_dim = schema.num_fields() * d_f;
        let mut params = ParamSet::new();
        let mut rng = init_rng(seed);
        let mut embeddings = Vec::with_capacity(n_tasks);
        let mut nets = Vec::with_capacity(n_tasks);
        for t in 0..n_tasks {
            embeddings.push(create_embeddings_named(&mut params, &mut rng, schema, d_f, &format!("t{t}.embed")));
            nets.push(create_mlp(&mut params, &mut rng, &format!("t{t}.net"), in_dim, &hyper.single_hidden, 1));
        }
        Ok(SingleTask { params, n_tasks, d_f, embeddings, nets })
    }
}

impl Model for SingleTask {
    fn name(&self) -> &'static str {
        "single_task"
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn num_tasks(&self) -> usize {
        self.n_tasks
    }

    fn forward(
        &self,
        _tape: &Tape,
        reg: &TapeParams,
        batch: &FeatureBatch,
        _ctx: &ForwardCtx,
    ) -> Result<Vec<DiffTensor>, ModelError> {
        let mut preds = Vec::with_capacity(self.n_tasks);
        for t in 0..self.n_tasks {
            let h = embed_lookup(reg, &self.embeddings[t], batch, self.d_f)
                .reshape(&[batch.batch, batch.fields * self.d_f]);
            preds.push(mlp_forward(reg, &self.nets[t], &h).sigmoid().reshape(&[batch.batch]));
        }
        Ok(preds)
    }
}

/// Shared embeddings and trunk MLP; per-task towers on the trunk output.
pub struct SharedBottom {
    params: ParamSet,
    n_tasks: usize,
    d_f: usize,
    embeddings: Vec<usize>,
    trunk: MlpHandles,
    towers: Vec<TowerHandles>,
}

impl SharedBottom {
    pub fn new(schema: &DatasetSchema, hyper: &ModelHyper, seed: u64) -> Result<Self, ModelError> {
        if hyper.bottom_hidden.is_empty() {
            return Err(ModelError::Config("shared trunk needs at least one layer".into()));
        }
        let n_tasks = schema.num_tasks();
        let d_f = hyper.embed_dim;
        let in_dim = schema.num_fields() * d_f;
        let mut params = ParamSet::new();
        let mut rng = init_rng(seed);
        let embeddings = create_embeddings(&mut params, &mut rng, schema, d_f);
        let (trunk_hidden, trunk_out) = hyper.bottom_hidden.split_at(hyper.bottom_hidden.len() - 1);
        let trunk = create_mlp(&mut params, &mut rng, "trunk", in_dim, trunk_hidden, trunk_out[0]);
        let towers = (0..n_tasks)
            .map(|t| create_tower(&mut params, &mut rng, &format!("tower.t{t}"), trunk_out[0], hyper.tower_hidden))
            .collect();
        Ok(SharedBottom { params, n_tasks, d_f, embeddings, trunk, towers })
    }
}

impl Model for SharedBottom {
    fn name(&self) -> &'static str {
        "shared_bottom"
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn num_tasks(&self) -> usize {
        self.n_tasks
    }

    fn forward(
        &self,
        _tape: &Tape,
        reg: &TapeParams,
        batch: &FeatureBatch,
        _ctx: &ForwardCtx,
    ) -> Result<Vec<DiffTensor>, ModelError> {
        let h = embed_lookup(reg, &self.embeddings, batch, self.d_f)
            .reshape(&[batch.batch, batch.fields * self.d_f]);
        let shared = mlp_forward(reg, &self.trunk, &h).relu();
        Ok(self
            .towers
            .iter()
            .map(|tower| tower_forward(reg, tower, &shared))
            .collect())
    }
}

/// Mixture of shared experts with one softmax gate per task.
pub struct Mmoe {
    params: ParamSet,
    n_tasks: usize,
    d_f: usize,
    embeddings: Vec<usize>,
    experts: Vec<MlpHandles>,
    gates: Vec<AffineHandles>,
    towers: Vec<TowerHandles>,
}

impl Mmoe {
    pub fn new(schema: &DatasetSchema, hyper: &ModelHyper, seed: u64) -> Result<Self, ModelError> {
        if hyper.expert_count == 0 {
            return Err(ModelError::Config("need at least one expert".into()));
        }
        let n_tasks = schema.num_tasks();
        let d_f = hyper.embed_dim;
        let in_dim = schema.num_fields() * d_f;
        let mut params = ParamSet::new();
        let mut rng = init_rng(seed);
        let embeddings = create_embeddings(&mut params, &mut rng, schema, d_f);
        let experts = (0..hyper.expert_count)
            .map(|e| create_mlp(&mut params, &mut rng, &format!("expert.e{e}"), in_dim, &[hyper.expert_hidden], hyper.expert_dim))
            .collect();
        let gates = (0..n_tasks)
            .map(|t| create_affine(&mut params, &mut rng, &format!("gate.t{t}"), in_dim, hyper.expert_count))
            .collect();
        let towers = (0..n_tasks)
            .map(|t| create_tower(&mut params, &mut rng, &format!("tower.t{t}"), hyper.expert_dim, hyper.tower_hidden))
            .collect();
        Ok(Mmoe { params, n_tasks, d_f, embeddings, experts, gates, towers })
    }
}

impl Model for Mmoe {
    fn name(&self) -> &'static str {
        "mmoe"
    }

    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn num_tasks(&self) -> usize {
        self.n_tasks
    }

    fn forward(
        &self,
        _tape: &Tape,
        reg: &TapeParams,
        batch: &FeatureBatch,
        _ctx: &ForwardCtx,
    ) -> Result<Vec<DiffTensor>, ModelError> {
        let h = embed_lookup(reg, &self.embeddings, batch, self.d_f)
            .reshape(&[batch.batch, batch.fields * self.d_f]);
        let expert_outs: Vec<DiffTensor> = self
            .experts
            .iter()
            .map(|e| mlp_forward(reg, e, &h).relu())
            .collect();
        let mut preds = Vec::with_capacity(self.n_tasks);
        for t in 0..self.n_tasks {
            let gate = affine(reg, &self.gates[t], &h).softmax_rows()?;
            let mut mixed: Option<DiffTensor> = None;
            for (e, expert) in expert_outs.iter().enumerate() {
                let weight = gate.slice_cols(e, 1).reshape(&[batch.batch]);
                let weighted = expert.mul_col_vec(&weight);
                mixed = Some(match mixed {
                    None => weighted,
                    Some(acc) => acc.add(&weighted),
                });
            }
            preds.push(tower_forward(reg, &self.towers[t], &mixed.unwrap()));
        }
        Ok(preds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureKind, FeatureSpec};
    use crate::model::{build_model, ModelKind};

    fn tiny_schema() -> DatasetSchema {
        DatasetSchema::new(
            vec![
                FeatureSpec { name: "a".into(), kind: FeatureKind::Categorical, vocab: 6 },
                FeatureSpec { name: "b".into(), kind: FeatureKind::Categorical, vocab: 4 },
            ],
            vec!["t1".into(), "t2".into()],
        )
        .unwrap()
    }

    fn tiny_hyper() -> ModelHyper {
        ModelHyper {
            embed_dim: 4,
            heads: 2,
            inducing_points: 3,
            ps_layers: 1,
            tower_hidden: 5,
            single_hidden: vec![8, 6],
            bottom_hidden: vec![8, 6],
            expert_count: 3,
            expert_dim: 4,
            expert_hidden: 6,
            ..ModelHyper::default()
        }
    }

    fn tiny_batch() -> FeatureBatch {
        FeatureBatch {
            indices: vec![0, 1, 5, 3, 2, 0],
            labels: vec![vec![1.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]],
            batch: 3,
            fields: 2,
        }
    }

    #[test]
    fn all_models_emit_per_task_probabilities() {
        let schema = tiny_schema();
        let hyper = tiny_hyper();
        let batch = tiny_batch();
        for kind in [ModelKind::Apem, ModelKind::SingleTask, ModelKind::SharedBottom, ModelKind::Mmoe] {
            let model = build_model(kind, &schema, &hyper, 21).unwrap();
            let tape = Tape::new();
            let reg = model.params().register(&tape);
            let ctx = ForwardCtx { step: 0, gamma: 10.0 };
            let preds = model.forward(&tape, &reg, &batch, &ctx).unwrap();
            assert_eq!(preds.len(), 2, "{kind}");
            for p in preds {
                assert_eq!(p.shape(), vec![3], "{kind}");
                assert!(p.values().iter().all(|v| *v > 0.0 && *v < 1.0), "{kind}");
            }
        }
    }

    #[test]
    fn builds_are_seed_deterministic() {
        for kind in [ModelKind::SingleTask, ModelKind::SharedBottom, ModelKind::Mmoe] {
            let m1 = build_model(kind, &tiny_schema(), &tiny_hyper(), 5).unwrap();
            let m2 = build_model(kind, &tiny_schema(), &tiny_hyper(), 5).unwrap();
            assert_eq!(m1.params(), m2.params(), "{kind}");
        }
    }

    #[test]
    fn gradients_flow_to_all_used_parameters() {
        // shared trunk: every parameter should receive gradient from the sum
        // of both task losses
        let model = SharedBottom::new(&tiny_schema(), &tiny_hyper(), 3).unwrap();
        let batch = tiny_batch();
        let tape = Tape::new();
        let reg = model.params().register(&tape);
        let preds = model
            .forward(&tape, &reg, &batch, &ForwardCtx { step: 0, gamma: 1.0 })
            .unwrap();
        let (l1, _) = preds[0].bce_mean(&batch.labels[0]);
        let (l2, _) = preds[1].bce_mean(&batch.labels[1]);
        let loss = l1.add(&l2);
        tape.backward(&loss).unwrap();
        for idx in 0..model.params().len() {
            let name = &model.params().entry(idx).name;
            let g = reg.get(idx).grad();
            // embedding rows for absent buckets stay zero, that's fine; the
            // tensor itself must exist
            assert!(g.is_some(), "no gradient for {name}");
        }
    }
}
