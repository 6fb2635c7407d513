use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dbe_core::autodiff::Tape;
use dbe_core::binarizer::BinaryCodeSet;
use dbe_core::datasets::LabelSet;
use dbe_core::losses::softmax_cross_entropy;
use dbe_core::network::{build_dbe_lenet, Mode, Model, ModelConfig};
use dbe_core::retrieval::{evaluate_retrieval, HammingIndex, QuerySource};
use dbe_core::Tensor;

fn images(n: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn([n, 1, 28, 28], |_| rng.random_range(0.0..1.0))
}

fn train_step(model: &Model<f32>, x: &Tensor<f32>, y: &[usize]) -> f32 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let input = tape.leaf(x.clone());
    let e = model.forward(&mut tape, &bound, input, Mode::Train).unwrap();
    let loss = softmax_cross_entropy(&mut tape, e.logits, y).unwrap();
    tape.backward(loss).unwrap();
    tape.value(loss).data()[0]
}

fn retrieval_fixture() -> (HammingIndex, BinaryCodeSet, LabelSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let db = BinaryCodeSet::from_fn(20_000, 64, |_, _| rng.random()).unwrap();
    let q = BinaryCodeSet::from_fn(200, 64, |_, _| rng.random()).unwrap();
    let dl = LabelSet::multiclass((0..20_000).map(|i| i % 10).collect(), 10).unwrap();
    let ql = LabelSet::multiclass((0..200).map(|i| i % 10).collect(), 10).unwrap();
    (HammingIndex::new(db, dl).unwrap(), q, ql)
}

/// Times `work` on the global pool and, in parallel builds, on a one-thread pool.
fn in_modes<R: Send>(c: &mut Criterion, name: &str, work: impl Fn() -> R + Sync) {
    let mode = if dbe_core::par::is_parallel() { "parallel" } else { "sequential" };
    c.bench_function(&format!("{name}/{mode}"), |b| b.iter(&work));
    #[cfg(feature = "parallel")]
    {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        c.bench_function(&format!("{name}/parallel-1-thread"), |b| b.iter(|| pool.install(&work)));
    }
}

fn kernels(c: &mut Criterion) {
    let model = build_dbe_lenet::<f32>(&ModelConfig::default()).unwrap();
    let x = images(64, 1);
    let y: Vec<usize> = (0..64).map(|i| i % 10).collect();
    in_modes(c, "train_step_b64", || train_step(&model, &x, &y));

    let test = images(500, 2);
    in_modes(c, "embed_500", || model.embed(&test, 250).unwrap());

    let (index, q, ql) = retrieval_fixture();
    in_modes(c, "retrieval_200x20k", || {
        evaluate_retrieval(&index, &q, &ql, QuerySource::Separate, &[100]).unwrap()
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels
}
criterion_main!(benches);
