use criterion::{black_box, criterion_group, criterion_main, Criterion};
use taftseg::taft::{build_transform, PrototypeSet, ReferenceBank};
use taftseg::tensor::{ConvSpec, Graph, Tensor};

fn ramp(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|i| ((i * 7919) % 1000) as f64 / 1000.0).collect(),
    )
    .unwrap()
}

fn conv(c: &mut Criterion) {
    let x = ramp(&[12, 48, 16, 16]);
    let w = ramp(&[32, 48, 3, 3]);
    c.bench_function("conv2d_3x3_forward_backward", |b| {
        b.iter(|| {
            let g = Graph::new();
            let xv = g.variable(x.clone());
            let wv = g.variable(w.clone());
            let y = xv.conv2d(wv, None, ConvSpec::new(1, 1, 1)).unwrap();
            black_box(g.backward(y.sum()).unwrap());
        })
    });
}

fn transform(c: &mut Criterion) {
    let mut shifted: Vec<Tensor> = (0..4).map(|_| ramp(&[64])).collect();
    for (k, t) in shifted.iter_mut().enumerate() {
        t.data_mut()[k] += 1.0;
    }
    c.bench_function("build_transform_d64", |b| {
        b.iter(|| {
            let g = Graph::new();
            let protos = PrototypeSet {
                fg: g.constant(shifted[0].clone()),
                bg: g.constant(shifted[1].clone()),
                shots: 1,
            };
            let refs = ReferenceBank {
                fg: g.constant(shifted[2].clone()),
                bg: g.constant(shifted[3].clone()),
            };
            black_box(build_transform(&protos, &refs, 1e-8).unwrap().p.value());
        })
    });
}

criterion_group!(benches, conv, transform);
criterion_main!(benches);
