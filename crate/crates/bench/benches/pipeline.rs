use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use docre_core::diffmath::{prng, Tape};
use docre_core::fusion::{score_document, tune_tau};
use docre_core::rules::{silver_labels, PairScope};
use docre_core::trainer::joint_loss;
use docre_core::{EvidenceSource, LexiconProvider};
use rand::Rng;

fn forward(c: &mut Criterion) {
    let corpus = docre_bench::corpus(8);
    let model = docre_bench::model(&corpus);
    let doc = &corpus.docs[0];
    c.bench_function("score_doc", |b| b.iter(|| model.score_doc(black_box(doc), true).unwrap()));
    let source = EvidenceSource::Model { threshold: 0.5 };
    c.bench_function("score_document_with_pseudo", |b| {
        b.iter(|| score_document(&model, black_box(doc), &source, true).unwrap())
    });
}

fn train_step(c: &mut Criterion) {
    let corpus = docre_bench::corpus(8);
    let model = docre_bench::model(&corpus);
    let docs = &corpus.docs[..2];
    let seqs: Vec<_> = docs.iter().map(|d| model.mark(d).unwrap()).collect();
    let batch: Vec<_> = docs.iter().zip(&seqs).collect();
    for (name, joint) in [("loss_and_backward_joint", true), ("loss_and_backward_relation_only", false)] {
        c.bench_function(name, |b| {
            b.iter(|| {
                let mut tape = Tape::new();
                let p = model.params.leaves(&mut tape);
                let loss = joint_loss(&mut tape, &model.config, &p, &batch, 0.1, joint).unwrap().unwrap();
                tape.backward(loss.total).unwrap()
            })
        });
    }
}

fn rules(c: &mut Criterion) {
    let corpus = docre_bench::corpus(50);
    let provider = LexiconProvider::new(&corpus.lexicon);
    c.bench_function("silver_labels_50_docs", |b| {
        b.iter(|| {
            for d in &corpus.docs {
                black_box(silver_labels(d, &provider, PairScope::All));
            }
        })
    });
}

fn tau(c: &mut Criterion) {
    let mut rng = prng(0);
    let instances: Vec<(f64, bool)> =
        (0..2000).map(|_| (rng.gen_range(-8.0..8.0), rng.gen_bool(0.3))).collect();
    c.bench_function("tune_tau_2000", |b| {
        b.iter_batched(|| instances.clone(), |v| tune_tau(&v).unwrap(), BatchSize::SmallInput)
    });
}

criterion_group!(benches, forward, train_step, rules, tau);
criterion_main!(benches);
