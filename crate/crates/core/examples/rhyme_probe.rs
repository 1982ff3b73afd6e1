//! Scratch probe: can the rhyme head learn word -> class from clean and
//! lightly noised embeddings? Isolates controller-training behavior.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use versecraft::autodiff::Graph;
use versecraft::diffusion::{make_schedule, q_sample, LatentSeq, ScheduleKind};
use versecraft::embedding::EmbeddingTable;
use versecraft::nn::{noise_like, Adam, Mlp};
use versecraft::SeedRng;

fn main() {
    let mut rng = SeedRng::seed_from_u64(3);
    let n_words = 120usize;
    let r = 8u32;
    let dim = 16usize;
    let table = EmbeddingTable::new(&mut rng, n_words, dim);
    let schedule = make_schedule(200, ScheduleKind::Sqrt).unwrap();

    for max_t in [1usize, 20, 200] {
        let mut head = Mlp::new(&mut rng, dim, 64, r as usize);
        let mut opt = Adam::new(1e-3, &head.params());
        let iters = 20000;
        let batch = 16;
        for _ in 0..iters {
            let mut g = Graph::new();
            let staged = head.stage(&mut g);
            let words: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n_words)).collect();
            let classes: Vec<usize> = words.iter().map(|w| w % r as usize).collect();
            let mut x = Array2::zeros((batch, dim));
            for (i, &w) in words.iter().enumerate() {
                x.row_mut(i).assign(&table.matrix.row(w));
            }
            let t = rng.random_range(1..=max_t.max(1));
            let x0 = LatentSeq { values: x, t: 0 };
            let noise = noise_like(&mut rng, batch, dim);
            let xt = if max_t == 1 {
                x0
            } else {
                q_sample(&x0, t, &noise, &schedule).unwrap()
            };
            let xid = g.leaf(xt.values);
            let logits = staged.logits(&mut g, xid);
            let logp = g.row_log_softmax(logits);
            let nll = g.neg_pick(logp, &classes);
            let loss = g.scale(nll, 1.0 / batch as f64);
            let grads = g.backward(loss);
            let grad_list: Vec<Array2<f64>> = staged
                .param_ids()
                .iter()
                .map(|&id| grads.wrt(id).clone())
                .collect();
            opt.step(&mut head.params_mut(), &grad_list);
        }
        // clean accuracy
        let mut correct = 0;
        for w in 0..n_words {
            let x = table.matrix.row(w).insert_axis(ndarray::Axis(0)).to_owned();
            let logits = head.logits_plain(&x);
            let row = logits.row(0);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == w % r as usize {
                correct += 1;
            }
        }
        // accuracy at t=10
        let mut correct_noised = 0;
        let trials = 2000;
        for _ in 0..trials {
            let w = rng.random_range(0..n_words);
            let x = table.matrix.row(w).insert_axis(ndarray::Axis(0)).to_owned();
            let x0 = LatentSeq { values: x, t: 0 };
            let noise = noise_like(&mut rng, 1, dim);
            let xt = q_sample(&x0, 10, &noise, &schedule).unwrap();
            let logits = head.logits_plain(&xt.values);
            let row = logits.row(0);
            let mut best = 0;
            for j in 1..row.len() {
                if row[j] > row[best] {
                    best = j;
                }
            }
            if best == w % r as usize {
                correct_noised += 1;
            }
        }
        println!(
            "train t<=:{:3}  clean acc {:.3}  t=10 acc {:.3}",
            max_t,
            correct as f64 / n_words as f64,
            correct_noised as f64 / trials as f64
        );
    }
}
