//! Learnable bottleneck transformations, their composition into a steered
//! model, and safety-bundle aggregation. Every transformation contributes a
//! residual delta; the bottleneck activation itself is added exactly once.

use crate::error::{Result, SteerError};
use crate::numerics::{ops, ParamId, ParamStore, Rng, Tape, Tensor, Var};
use crate::scorenet::{Latent, PromptId, ScoreNetwork};

/// Transformation architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    /// A single learned vector added to the bottleneck.
    Constant,
    /// A small residual MLP h → Δ with zero-initialized output layer.
    Mlp,
}

/// Which objective a transformation serves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    /// Steers the neutral trajectory toward a target concept.
    Concept,
    /// Pulls the steered trajectory back toward the base model's behavior.
    Semantic,
    /// Single module trained on the combined objective (ablation mode).
    Shared,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Concept => "concept",
            Role::Semantic => "semantic",
            Role::Shared => "shared",
        }
    }
}

/// A learnable bottleneck perturbation for one concept.
#[derive(Clone, Debug)]
pub struct Transformation {
    kind: TransformKind,
    role: Role,
    concept: String,
    h_dim: usize,
    hidden: usize,
    store: ParamStore,
    ids: TransformIds,
}

#[derive(Clone, Debug)]
enum TransformIds {
    Constant {
        v: ParamId,
    },
    Mlp {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
}

impl Transformation {
    /// Zero-initialized constant-vector transformation: delta(h) = 0.
    pub fn new_constant(concept: impl Into<String>, role: Role, h_dim: usize) -> Self {
        let mut store = ParamStore::new();
        let v = store.add("v", Tensor::zeros(vec![h_dim]));
        Transformation {
            kind: TransformKind::Constant,
            role,
            concept: concept.into(),
            h_dim,
            hidden: 0,
            store,
            ids: TransformIds::Constant { v },
        }
    }

    /// Residual MLP transformation. The output layer starts at zero so
    /// delta(h) = 0 at initialization; the hidden layer is randomly
    /// initialized so it stays trainable.
    pub fn new_mlp(
        concept: impl Into<String>,
        role: Role,
        h_dim: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Self {
        let mut store = ParamStore::new();
        let scale = 1.0 / (h_dim as f64).sqrt();
        let w1 = store.add("w1", rng.normal_tensor(vec![hidden, h_dim]).scale(scale));
        let b1 = store.add("b1", Tensor::zeros(vec![hidden]));
        let w2 = store.add("w2", Tensor::zeros(vec![h_dim, hidden]));
        let b2 = store.add("b2", Tensor::zeros(vec![h_dim]));
        Transformation {
            kind: TransformKind::Mlp,
            role,
            concept: concept.into(),
            h_dim,
            hidden,
            store,
            ids: TransformIds::Mlp { w1, b1, w2, b2 },
        }
    }

    pub fn kind(&self) -> TransformKind {
        self.kind
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn concept(&self) -> &str {
        &self.concept
    }

    pub fn h_dim(&self) -> usize {
        self.h_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn check_h(&self, cols: usize) -> Result<()> {
        if cols != self.h_dim {
            return Err(SteerError::Bottleneck {
                expected: self.h_dim,
                got: cols,
            });
        }
        Ok(())
    }

    /// Residual delta for a batch of bottleneck rows [n, H].
    pub fn delta(&self, h: &Tensor) -> Result<Tensor> {
        self.check_h(h.cols())?;
        match &self.ids {
            TransformIds::Constant { v } => ops::broadcast_rows(self.store.value(*v), h.rows()),
            TransformIds::Mlp { w1, b1, w2, b2 } => {
                let a = ops::linear(h, self.store.value(*w1), self.store.value(*b1))?;
                let a = ops::silu(&a);
                ops::linear(&a, self.store.value(*w2), self.store.value(*b2))
            }
        }
    }

    /// Taped residual delta. With `train = true` the parameters bind to the
    /// tape and receive gradients on backward.
    pub fn delta_on(&self, tape: &mut Tape, h: Var, train: bool) -> Result<Var> {
        self.check_h(tape.value(h).cols())?;
        let n = tape.value(h).rows();
        let weight = |tape: &mut Tape, id: ParamId| {
            if train {
                tape.param(&self.store, id)
            } else {
                tape.constant(self.store.value(id).clone())
            }
        };
        match &self.ids {
            TransformIds::Constant { v } => {
                let vv = weight(tape, *v);
                tape.broadcast_rows(vv, n)
            }
            TransformIds::Mlp { w1, b1, w2, b2 } => {
                let w1v = weight(tape, *w1);
                let b1v = weight(tape, *b1);
                let w2v = weight(tape, *w2);
                let b2v = weight(tape, *b2);
                let a = tape.linear(h, w1v, b1v)?;
                let a = tape.silu(a);
                tape.linear(a, w2v, b2v)
            }
        }
    }

    /// Reassemble from persisted parts; used by the file loader.
    pub(crate) fn from_parts(
        kind: TransformKind,
        role: Role,
        concept: String,
        h_dim: usize,
        hidden: usize,
        values: Vec<(String, Tensor)>,
    ) -> Result<Self> {
        let mut t = match kind {
            TransformKind::Constant => Transformation::new_constant(concept, role, h_dim),
            TransformKind::Mlp => {
                // Placeholder init; every value is overwritten below.
                let mut rng = Rng::seed_from(0);
                Transformation::new_mlp(concept, role, h_dim, hidden, &mut rng)
            }
        };
        if values.len() != t.store.len() {
            return Err(SteerError::Format(format!(
                "transformation file has {} params, expected {}",
                values.len(),
                t.store.len()
            )));
        }
        let ids: Vec<ParamId> = t.store.ids().collect();
        for (id, (name, value)) in ids.into_iter().zip(values) {
            if t.store.get(id).name != name {
                return Err(SteerError::Format(format!(
                    "unexpected param `{name}`, expected `{}`",
                    t.store.get(id).name
                )));
            }
            t.store.set_value(id, value).map_err(|_| {
                SteerError::Format(format!("param `{name}` has a mismatched shape"))
            })?;
        }
        Ok(t)
    }
}

/// Anything that edits bottleneck activations during sampling.
pub trait BottleneckEdit {
    fn edit(&self, h: &Tensor) -> Result<Tensor>;
}

/// No-op edit: the base model.
pub struct IdentityEdit;

impl BottleneckEdit for IdentityEdit {
    fn edit(&self, h: &Tensor) -> Result<Tensor> {
        Ok(h.clone())
    }
}

/// Active module configuration of a steered model: exactly one of the three
/// arrangements.
#[derive(Clone, Debug)]
pub enum SteerModules {
    Pair {
        concept: Transformation,
        semantic: Transformation,
    },
    ConceptOnly {
        concept: Transformation,
    },
    Shared {
        shared: Transformation,
    },
}

/// Which deltas participate in a steered prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    /// Only the concept-alignment delta (the target-matching objective uses
    /// this view).
    ConceptOnly,
    /// Concept plus semantic deltas: the deployed model.
    Full,
}

/// Which module's parameters bind to the tape during a taped pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradTarget {
    None,
    Concept,
    Semantic,
    Shared,
}

impl SteerModules {
    pub fn h_dim(&self) -> usize {
        match self {
            SteerModules::Pair { concept, .. } => concept.h_dim(),
            SteerModules::ConceptOnly { concept } => concept.h_dim(),
            SteerModules::Shared { shared } => shared.h_dim(),
        }
    }

    pub fn concept_name(&self) -> &str {
        match self {
            SteerModules::Pair { concept, .. } => concept.concept(),
            SteerModules::ConceptOnly { concept } => concept.concept(),
            SteerModules::Shared { shared } => shared.concept(),
        }
    }

    /// Single-add rule: ĥ = h + Σ active deltas.
    pub fn apply_mode(&self, h: &Tensor, mode: PredictMode) -> Result<Tensor> {
        match self {
            SteerModules::Pair { concept, semantic } => {
                let mut out = h.add(&concept.delta(h)?)?;
                if mode == PredictMode::Full {
                    out = out.add(&semantic.delta(h)?)?;
                }
                Ok(out)
            }
            SteerModules::ConceptOnly { concept } => h.add(&concept.delta(h)?),
            SteerModules::Shared { shared } => h.add(&shared.delta(h)?),
        }
    }

    /// Taped single-add rule; `target` selects which module trains.
    pub fn apply_mode_on(
        &self,
        tape: &mut Tape,
        h: Var,
        mode: PredictMode,
        target: GradTarget,
    ) -> Result<Var> {
        match self {
            SteerModules::Pair { concept, semantic } => {
                let dc = concept.delta_on(tape, h, target == GradTarget::Concept)?;
                let mut out = tape.add(h, dc)?;
                if mode == PredictMode::Full {
                    let ds = semantic.delta_on(tape, h, target == GradTarget::Semantic)?;
                    out = tape.add(out, ds)?;
                }
                Ok(out)
            }
            SteerModules::ConceptOnly { concept } => {
                let dc = concept.delta_on(tape, h, target == GradTarget::Concept)?;
                tape.add(h, dc)
            }
            SteerModules::Shared { shared } => {
                let ds = shared.delta_on(tape, h, target == GradTarget::Shared)?;
                tape.add(h, ds)
            }
        }
    }

    /// The store of the module a gradient target refers to.
    pub fn target_store_mut(&mut self, target: GradTarget) -> Option<&mut ParamStore> {
        match (self, target) {
            (SteerModules::Pair { concept, .. }, GradTarget::Concept) => {
                Some(concept.store_mut())
            }
            (SteerModules::Pair { semantic, .. }, GradTarget::Semantic) => {
                Some(semantic.store_mut())
            }
            (SteerModules::ConceptOnly { concept }, GradTarget::Concept) => {
                Some(concept.store_mut())
            }
            (SteerModules::Shared { shared }, GradTarget::Shared) => Some(shared.store_mut()),
            _ => None,
        }
    }
}

impl BottleneckEdit for SteerModules {
    fn edit(&self, h: &Tensor) -> Result<Tensor> {
        self.apply_mode(h, PredictMode::Full)
    }
}

/// A frozen base network with its steering modules.
pub struct SteeredModel<'a> {
    pub base: &'a ScoreNetwork,
    pub modules: SteerModules,
}

impl<'a> SteeredModel<'a> {
    pub fn new(base: &'a ScoreNetwork, modules: SteerModules) -> Result<Self> {
        if modules.h_dim() != base.bottleneck_dim() {
            return Err(SteerError::Bottleneck {
                expected: base.bottleneck_dim(),
                got: modules.h_dim(),
            });
        }
        Ok(SteeredModel { base, modules })
    }

    /// Full-mode bottleneck edit ĥ = h + Δ_concept(h) + Δ_semantic(h).
    pub fn apply(&self, h: &Tensor) -> Result<Tensor> {
        self.modules.apply_mode(h, PredictMode::Full)
    }

    /// Prediction through the edited bottleneck, batched.
    pub fn steered_predict_batch(
        &self,
        z: &Tensor,
        prompts: &[PromptId],
        ts: &[usize],
        mode: PredictMode,
    ) -> Result<Tensor> {
        let h = self.base.encode_batch(z, prompts, ts)?;
        let edited = self.modules.apply_mode(&h, mode)?;
        self.base.decode_batch(&edited, prompts, ts)
    }

    pub fn steered_predict(&self, z: &Latent, y: PromptId, mode: PredictMode) -> Result<Tensor> {
        let row = Tensor::row(z.value.data());
        let out = self.steered_predict_batch(&row, &[y], &[z.timestep], mode)?;
        Tensor::new(z.value.shape().to_vec(), out.data().to_vec())
    }
}

/// Trained transformations over the safety concepts, applied jointly.
#[derive(Clone, Debug)]
pub struct SafetyBundle {
    members: Vec<Transformation>,
}

impl SafetyBundle {
    pub fn new(members: Vec<Transformation>) -> Result<Self> {
        if members.is_empty() {
            return Err(SteerError::EmptyBundle);
        }
        let h = members[0].h_dim();
        for m in &members {
            if m.h_dim() != h {
                return Err(SteerError::Bottleneck {
                    expected: h,
                    got: m.h_dim(),
                });
            }
        }
        Ok(SafetyBundle { members })
    }

    pub fn members(&self) -> &[Transformation] {
        &self.members
    }
}

impl BottleneckEdit for SafetyBundle {
    fn edit(&self, h: &Tensor) -> Result<Tensor> {
        aggregate_safety(self, h)
    }
}

/// ĥ = h + Σ_m Δ_m(h) over every bundle member.
pub fn aggregate_safety(bundle: &SafetyBundle, h: &Tensor) -> Result<Tensor> {
    let mut out = h.clone();
    for m in &bundle.members {
        out = out.add(&m.delta(h)?)?;
    }
    Ok(out)
}

/// Prediction through an arbitrary bottleneck edit (sampler entry point).
pub fn edited_predict_batch(
    net: &ScoreNetwork,
    edit: &dyn BottleneckEdit,
    z: &Tensor,
    prompts: &[PromptId],
    ts: &[usize],
) -> Result<Tensor> {
    let h = net.encode_batch(z, prompts, ts)?;
    let edited = edit.edit(&h)?;
    net.decode_batch(&edited, prompts, ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorenet::{ConceptVocabulary, NetworkConfig, Provenance};
    use crate::schedule::NoiseSchedule;

    fn small_net(seed: u64) -> ScoreNetwork {
        let vocab = ConceptVocabulary::from_world(&crate::worlds::gauss2d_gender()).unwrap();
        let cfg = NetworkConfig {
            data_dim: 2,
            bottleneck: 8,
            hidden: 12,
            prompt_dim: 4,
            time_dim: 4,
        };
        ScoreNetwork::new(cfg, vocab, &mut Rng::seed_from(seed))
    }

    fn set_constant(t: &mut Transformation, values: &[f64]) {
        let id = t.store.ids().next().unwrap();
        t.store.set_value(id, Tensor::vector(values)).unwrap();
    }

    #[test]
    fn zero_init_transformations_are_identity() {
        let modules = SteerModules::Pair {
            concept: Transformation::new_constant("woman", Role::Concept, 8),
            semantic: Transformation::new_constant("woman", Role::Semantic, 8),
        };
        let mut rng = Rng::seed_from(1);
        let h = rng.normal_tensor(vec![3, 8]);
        assert_eq!(modules.apply_mode(&h, PredictMode::Full).unwrap(), h);
        assert_eq!(modules.apply_mode(&h, PredictMode::ConceptOnly).unwrap(), h);
    }

    #[test]
    fn zero_init_mlp_delta_is_zero() {
        let mut rng = Rng::seed_from(2);
        let t = Transformation::new_mlp("woman", Role::Concept, 8, 16, &mut rng);
        let h = rng.normal_tensor(vec![4, 8]);
        let d = t.delta(&h).unwrap();
        assert!(d.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn constant_kind_single_add_rule() {
        let mut concept = Transformation::new_constant("woman", Role::Concept, 4);
        let mut semantic = Transformation::new_constant("woman", Role::Semantic, 4);
        set_constant(&mut concept, &[1.0, 0.0, 0.0, 0.0]);
        set_constant(&mut semantic, &[0.0, 1.0, 0.0, 0.0]);
        let modules = SteerModules::Pair { concept, semantic };
        let mut rng = Rng::seed_from(3);
        let h = rng.normal_tensor(vec![2, 4]);
        let out = modules.apply_mode(&h, PredictMode::Full).unwrap();
        let shift = out.sub(&h).unwrap();
        // Input-independent shift equal to v_concept + v_semantic on each row
        // (up to rounding of the h ± v additions).
        for r in 0..2 {
            for (s, e) in shift.row_slice(r).iter().zip(&[1.0, 1.0, 0.0, 0.0]) {
                assert!((s - e).abs() < 1e-12, "shift {s} vs {e}");
            }
        }
    }

    #[test]
    fn concept_only_equals_full_with_zero_semantic() {
        let mut concept = Transformation::new_constant("woman", Role::Concept, 4);
        set_constant(&mut concept, &[0.3, -0.2, 0.1, 0.5]);
        let pair = SteerModules::Pair {
            concept: concept.clone(),
            semantic: Transformation::new_constant("woman", Role::Semantic, 4),
        };
        let only = SteerModules::ConceptOnly { concept };
        let mut rng = Rng::seed_from(4);
        let h = rng.normal_tensor(vec![3, 4]);
        assert_eq!(
            pair.apply_mode(&h, PredictMode::Full).unwrap(),
            only.apply_mode(&h, PredictMode::ConceptOnly).unwrap()
        );
        assert_eq!(
            pair.apply_mode(&h, PredictMode::ConceptOnly).unwrap(),
            pair.apply_mode(&h, PredictMode::Full).unwrap()
        );
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let t = Transformation::new_constant("woman", Role::Concept, 8);
        let h = Tensor::zeros(vec![1, 4]);
        assert!(matches!(
            t.delta(&h).unwrap_err(),
            SteerError::Bottleneck { expected: 8, got: 4 }
        ));
        let net = small_net(5);
        let modules = SteerModules::ConceptOnly {
            concept: Transformation::new_constant("woman", Role::Concept, 4),
        };
        assert!(SteeredModel::new(&net, modules).is_err());
    }

    #[test]
    fn zero_init_steered_predict_is_bitwise_base() {
        let net = small_net(6);
        let modules = SteerModules::Pair {
            concept: Transformation::new_constant("woman", Role::Concept, 8),
            semantic: Transformation::new_constant("woman", Role::Semantic, 8),
        };
        let model = SteeredModel::new(&net, modules).unwrap();
        let sched = NoiseSchedule::default_toy();
        let mut rng = Rng::seed_from(7);
        for _ in 0..5 {
            let z = Latent::new(
                rng.normal_tensor(vec![2]),
                37,
                Provenance::ReverseChain,
                &sched,
            )
            .unwrap();
            let y = PromptId(0);
            let steered = model.steered_predict(&z, y, PredictMode::Full).unwrap();
            let base = net.predict(&z, y).unwrap();
            assert_eq!(steered, base);
        }
    }

    #[test]
    fn singleton_bundle_matches_pair_application() {
        let mut t = Transformation::new_constant("violent", Role::Concept, 4);
        set_constant(&mut t, &[0.5, 0.0, -0.5, 0.0]);
        let bundle = SafetyBundle::new(vec![t.clone()]).unwrap();
        let mut rng = Rng::seed_from(8);
        let h = rng.normal_tensor(vec![2, 4]);
        let via_bundle = aggregate_safety(&bundle, &h).unwrap();
        let direct = h.add(&t.delta(&h).unwrap()).unwrap();
        assert_eq!(via_bundle, direct);
    }

    #[test]
    fn bundle_aggregation_zero_members_and_order() {
        assert!(matches!(
            SafetyBundle::new(vec![]).unwrap_err(),
            SteerError::EmptyBundle
        ));

        let zero_a = Transformation::new_constant("violent", Role::Concept, 4);
        let zero_b = Transformation::new_constant("explicit", Role::Concept, 4);
        let bundle = SafetyBundle::new(vec![zero_a, zero_b]).unwrap();
        let mut rng = Rng::seed_from(9);
        let h = rng.normal_tensor(vec![2, 4]);
        assert_eq!(aggregate_safety(&bundle, &h).unwrap(), h);

        let mut a = Transformation::new_constant("violent", Role::Concept, 4);
        let mut b = Transformation::new_constant("explicit", Role::Concept, 4);
        set_constant(&mut a, &[0.25, 0.0, 1.0, -2.0]);
        set_constant(&mut b, &[1.5, -0.25, 0.0, 4.0]);
        let fwd = SafetyBundle::new(vec![a.clone(), b.clone()]).unwrap();
        let rev = SafetyBundle::new(vec![b, a]).unwrap();
        // Two-member sums commute bitwise in IEEE arithmetic.
        assert_eq!(
            aggregate_safety(&fwd, &h).unwrap(),
            aggregate_safety(&rev, &h).unwrap()
        );
    }

    #[test]
    fn mlp_delta_taped_matches_plain() {
        let mut rng = Rng::seed_from(10);
        let mut t = Transformation::new_mlp("woman", Role::Concept, 8, 8, &mut rng);
        // Give the output layer real values so the delta is nonzero.
        let ids: Vec<_> = t.store.ids().collect();
        t.store
            .set_value(ids[2], rng.normal_tensor(vec![8, 8]).scale(0.3))
            .unwrap();
        let h = rng.normal_tensor(vec![2, 8]);
        let plain = t.delta(&h).unwrap();
        let mut tape = Tape::new();
        let hv = tape.constant(h);
        let dv = t.delta_on(&mut tape, hv, false).unwrap();
        assert_eq!(tape.value(dv), &plain);
    }
}
