use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use keeplearn::continual::estimate_fisher_diag;
use keeplearn::data::{Dataset, SyntheticSpec};
use keeplearn::network::{BackboneSpec, HeadSpec, InverseSpec, Network, NetworkSpec};
use keeplearn::tensor::{exec, GroupId, ParamSet, Tape, Targets};

fn setup() -> (Network, ParamSet<f32>, Dataset) {
    let net = Network::new(NetworkSpec {
        backbone: BackboneSpec::desk([8, 8, 1], [8, 16, 32]),
        head: HeadSpec { classes: 4, kind: Default::default() },
        aux_head: None,
        inverse: Some(InverseSpec { widths: vec![16, 32] }),
    })
    .unwrap();
    let params = net.init_params(1, true).unwrap();
    let spec = SyntheticSpec { classes: 4, n_per_class: 64, shape: [8, 8, 1], noise_sigma: 0.5, seed: 3, fine_split: None };
    (net, params, spec.generate().unwrap())
}

fn modes() -> [(&'static str, bool); 2] {
    [("sequential", false), ("parallel", true)]
}

fn train_step(c: &mut Criterion) {
    let (net, params, data) = setup();
    let refs: Vec<_> = data.examples.iter().collect();
    let x = data.batch_tensor::<f32>(&refs).unwrap();
    let labels: Vec<usize> = data.examples.iter().map(|e| e.label).collect();
    let mut group = c.benchmark_group("forward_backward_256");
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(on);
            b.iter(|| {
                let mut tape = Tape::new();
                let vars = params.bind(&mut tape).unwrap();
                let xv = tape.leaf(&x, false).unwrap();
                let z = net.backbone_forward(&mut tape, &vars, xv).unwrap();
                let (logits, _) = net.head_logits(&mut tape, &vars, GroupId::NewHead, z).unwrap();
                let ce = tape.softmax_cross_entropy(logits, &Targets::Index(labels.clone()), 1.0).unwrap();
                let rec = net.reconstruction_loss(&mut tape, &vars, z, GroupId::NewHead).unwrap();
                let loss = tape.add(ce, rec).unwrap();
                tape.backward(loss).unwrap();
            })
        });
    }
    group.finish();
}

fn fisher(c: &mut Criterion) {
    let (net, params, data) = setup();
    let mut group = c.benchmark_group("fisher_256");
    group.sample_size(10);
    for (name, on) in modes() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            exec::set_parallel(on);
            b.iter(|| estimate_fisher_diag(&net, &params, &data, 7, 2).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, train_step, fisher);
criterion_main!(benches);
