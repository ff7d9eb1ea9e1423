//! Source-source and source-target feature pairs fed to the discriminators.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::instance::InstanceFeatureSet;
use crate::nn::{Graph, Var};
use crate::split_pooling::ScaleGroup;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PairGroup {
    /// Both members from the source domain.
    SourceSource,
    /// Source member first, target member second.
    SourceTarget,
}

/// Discriminator input batch. With pairing disabled the items are single,
/// uncombined features and `paired` is false.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub group: PairGroup,
    pub class_id: Option<usize>,
    pub scale_group: Option<ScaleGroup>,
    pub items: Var,
    pub len: usize,
    pub paired: bool,
}

/// Index pairs for both groups; `first` indexes the source pool, `second`
/// the source pool for SS and the target pool for ST.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairIndices {
    pub ss: Vec<(usize, usize)>,
    pub st: Vec<(usize, usize)>,
}

/// Channel concatenation of two equally shaped `[n, C, ..]` features, `a` first.
pub fn combine(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("cannot combine {:?} with {:?}", g.shape(a), g.shape(b))));
    }
    let n = g.shape(a)[0];
    let pairs: Vec<_> = (0..n).map(|i| (i, i)).collect();
    Ok(g.pair_concat(a, b, &pairs))
}

/// Draws `n_pairs` SS pairs of distinct source indices and `n_pairs` ST
/// pairs, all with replacement across pairs. `None` signals that this step
/// must skip the term (fewer than two source or no target features).
pub fn sample_pair_indices(n_source: usize, n_target: usize, n_pairs: usize, rng: &mut impl Rng) -> Option<PairIndices> {
    if n_source < 2 || n_target == 0 || n_pairs == 0 {
        return None;
    }
    let mut ss = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let i = rng.gen_range(0..n_source);
        let mut j = rng.gen_range(0..n_source - 1);
        if j >= i {
            j += 1;
        }
        ss.push((i, j));
    }
    let st = (0..n_pairs).map(|_| (rng.gen_range(0..n_source), rng.gen_range(0..n_target))).collect();
    Some(PairIndices { ss, st })
}

/// Builds (G1, G2) from `[n, ..]` source and target feature rows.
pub fn make_pairs(
    g: &mut Graph,
    source: Var,
    target: Var,
    n_pairs: usize,
    rng: &mut impl Rng,
) -> Option<(PairBatch, PairBatch)> {
    let idx = sample_pair_indices(g.shape(source)[0], g.shape(target)[0], n_pairs, rng)?;
    let ss = g.pair_concat(source, source, &idx.ss);
    let st = g.pair_concat(source, target, &idx.st);
    let batch = |group, items| PairBatch { group, class_id: None, scale_group: None, items, len: n_pairs, paired: true };
    Some((batch(PairGroup::SourceSource, ss), batch(PairGroup::SourceTarget, st)))
}

/// Unpaired variant used when pairing is switched off: G1 holds single
/// source features and G2 single target features, `n_pairs` each.
pub fn make_singles(
    g: &mut Graph,
    source: Var,
    target: Var,
    n_pairs: usize,
    rng: &mut impl Rng,
) -> Option<(PairBatch, PairBatch)> {
    let (ns, nt) = (g.shape(source)[0], g.shape(target)[0]);
    if ns == 0 || nt == 0 || n_pairs == 0 {
        return None;
    }
    let si: Vec<usize> = (0..n_pairs).map(|_| rng.gen_range(0..ns)).collect();
    let ti: Vec<usize> = (0..n_pairs).map(|_| rng.gen_range(0..nt)).collect();
    let s = g.select_rows(source, &si);
    let t = g.select_rows(target, &ti);
    let batch = |group, items| PairBatch { group, class_id: None, scale_group: None, items, len: n_pairs, paired: false };
    Some((batch(PairGroup::SourceSource, s), batch(PairGroup::SourceTarget, t)))
}

/// Per-class pairs; classes lacking two source or one target feature are
/// omitted. An empty map is the skip signal.
pub fn make_instance_pairs(
    g: &mut Graph,
    source: &InstanceFeatureSet,
    target: &InstanceFeatureSet,
    n_pairs_per_class: usize,
    paired: bool,
    rng: &mut impl Rng,
) -> BTreeMap<usize, (PairBatch, PairBatch)> {
    let mut out = BTreeMap::new();
    for (&cls, &s) in &source.by_class {
        let Some(&t) = target.by_class.get(&cls) else { continue };
        let made = if paired {
            make_pairs(g, s, t, n_pairs_per_class, rng)
        } else {
            make_singles(g, s, t, n_pairs_per_class, rng)
        };
        if let Some((mut a, mut b)) = made {
            a.class_id = Some(cls);
            b.class_id = Some(cls);
            out.insert(cls, (a, b));
        }
    }
    out
}
