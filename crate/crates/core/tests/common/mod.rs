//! Brute-force oracles shared by the explain and acceptance tests.

use std::collections::BTreeSet;

use evoaug::augment::{Gene, Operator};
use evoaug::evolve::FitnessRecord;
use evoaug::policy::{Chromosome, SslAlgorithm};
use evoaug::rng::substream;
use rand::seq::SliceRandom;
use rand::Rng;

/// Random log over a small operator pool so that comparators are common.
pub fn random_log(seed: u64, len: usize, pool: usize) -> Vec<FitnessRecord> {
    let mut rng = substream(seed, "explain-log", &[]);
    (0..len)
        .map(|i| {
            let mut ops: Vec<Operator> = Operator::ALL[..pool].to_vec();
            ops.shuffle(&mut rng);
            let genes = ops[..3]
                .iter()
                .map(|&op| {
                    let r = op.range();
                    Gene::new(op, rng.random_range(r.min..=r.max))
                })
                .collect();
            FitnessRecord {
                evaluation_id: i as u64,
                generation: i / 15,
                slot: i % 15,
                seed,
                algorithm: SslAlgorithm::ALL[rng.random_range(0..4)],
                // coarse values produce ties for the ranking
                fitness: (rng.random_range(0..40) as f64) / 40.0,
                chromosome: Chromosome::new(genes),
                flag: None,
            }
        })
        .collect()
}

pub fn op_set(c: &Chromosome) -> BTreeSet<Operator> {
    c.genes.iter().map(|g| g.op).collect()
}

/// Literal reading of the definition: for each record with `op`, scan every
/// record and test whether its set is `(ops(c) \ {op}) ∪ {x}` for some
/// `x ≠ op`.
pub fn brute_sensitivity(records: &[FitnessRecord], op: Operator) -> Option<(f64, usize)> {
    let mut sum = 0.0;
    let mut matched = 0;
    let mut pairs = 0;
    for c in records {
        let cs = op_set(&c.chromosome);
        if !cs.contains(&op) {
            continue;
        }
        let mut base = cs.clone();
        base.remove(&op);
        let mut comp_sum = 0.0;
        let mut comp_n = 0;
        for d in records {
            let ds = op_set(&d.chromosome);
            let hit = Operator::ALL.iter().filter(|&&x| x != op).any(|&x| {
                let mut want = base.clone();
                want.insert(x);
                want.len() == cs.len() && want == ds
            });
            if hit {
                comp_sum += d.fitness;
                comp_n += 1;
            }
        }
        if comp_n > 0 {
            sum += (c.fitness - comp_sum / comp_n as f64).abs();
            matched += 1;
            pairs += comp_n;
        }
    }
    (matched > 0).then(|| (sum / matched as f64, pairs))
}

pub fn brute_importance(records: &[FitnessRecord], op: Operator, n: usize) -> usize {
    // selection of the best remaining record, n times
    let mut taken = vec![false; records.len()];
    let mut count = 0;
    for _ in 0..n {
        let mut best: Option<usize> = None;
        for (i, r) in records.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let better = match best {
                None => true,
                Some(b) => {
                    let q = &records[b];
                    r.fitness > q.fitness
                        || (r.fitness == q.fitness
                            && (r.generation < q.generation
                                || (r.generation == q.generation && r.evaluation_id < q.evaluation_id)))
                }
            };
            if better {
                best = Some(i);
            }
        }
        let b = best.unwrap();
        taken[b] = true;
        if records[b].chromosome.genes.iter().any(|g| g.op == op) {
            count += 1;
        }
    }
    count
}

