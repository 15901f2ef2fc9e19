use bmnet::bench::{count_ops, instrumented_forward, runtime_probe};
use bmnet::layers::{Mode, CNN1, CNN2, CNN3, CNN4};
use bmnet::{NetworkSpec, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn initialized(text: &str, shape: [usize; 3], seed: u64) -> NetworkSpec {
    let mut net = NetworkSpec::parse(text, shape).unwrap();
    net.init_params(&mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    net
}

fn image(shape: [usize; 3], seed: u64) -> Vec<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..shape.iter().product::<usize>()).map(|_| r.gen_range(0.0..1.0)).collect()
}

#[test]
fn dense_classical_counts() {
    let net = initialized("fc1(10)", [1, 1, 100], 0);
    let ops = count_ops(&net, [1, 1, 100]).unwrap();
    let fc = ops.layer("fc1").unwrap();
    assert_eq!(fc.mults, 1000);
    assert_eq!(fc.adds, 1000);
    assert_eq!(ops.core_mults(), 1000);
}

#[test]
fn dense_bm_counts() {
    let net = initialized("bmfc1(10)", [1, 1, 100], 0);
    let ops = count_ops(&net, [1, 1, 100]).unwrap();
    let fc = ops.layer("fc1").unwrap();
    assert_eq!(fc.mults, 0);
    assert_eq!(fc.exps, 40);
    assert_eq!(fc.lns, 200);
    assert!(fc.adds >= 4000);
    assert_eq!(fc.maxes, 4 * (1000 - 10));
}

#[test]
fn converting_conv1_removes_its_multiplications_only() {
    let net = initialized(CNN1, [1, 28, 28], 3);
    let before = count_ops(&net, [1, 28, 28]).unwrap();
    let converted = net.convert_layer("conv1").unwrap();
    let after = count_ops(&converted, [1, 28, 28]).unwrap();
    assert_eq!(after.layer("conv1").unwrap().mults, 0);
    assert_eq!(after.layer("fc1"), before.layer("fc1"));
    assert_eq!(after.core_mults(), before.layer("fc1").unwrap().mults);
    let full = converted.convert_layer("fc1").unwrap();
    assert_eq!(count_ops(&full, [1, 28, 28]).unwrap().core_mults(), 0);
}

#[test]
fn instrumented_counts_equal_analytic_counts() {
    let cases: Vec<(String, [usize; 3])> = vec![
        (CNN1.into(), [1, 28, 28]),
        (CNN2.into(), [1, 28, 28]),
        (CNN3.into(), [1, 28, 28]),
        (CNN4.into(), [1, 28, 28]),
        ("conv1(3, 3, 2, 2, 1) - relu1 - maxpool1(2, 2) - conv2(4, 2, 3, 1, 2) - fc1(5) - softmax1".into(), [2, 9, 11]),
    ];
    for (i, (text, shape)) in cases.iter().enumerate() {
        let classical = initialized(text, *shape, i as u64);
        let mut converted = classical.clone();
        for name in classical.convertible_layers() {
            converted.convert_in_place(&name).unwrap();
        }
        let x = image(*shape, 17 + i as u64);
        for net in [&classical, &converted] {
            let (_, dynamic) = instrumented_forward(net, &x).unwrap();
            let analytic = count_ops(net, *shape).unwrap();
            assert_eq!(dynamic, analytic, "{}", net.architecture());
        }
    }
}

#[test]
fn instrumented_output_matches_fast_forward() {
    let shape = [1, 28, 28];
    let mut net = initialized(CNN2, shape, 5);
    net.convert_in_place("conv1").unwrap();
    let x = image(shape, 9);
    let (slow, _) = instrumented_forward(&net, &x).unwrap();
    let batch = Tensor::new(&[1, 1, 28, 28], x).unwrap();
    let fast = net.forward(batch, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    for (a, b) in slow.iter().zip(fast.data()) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn probe_statistics() {
    let net = initialized(CNN1, [1, 28, 28], 1);
    let one = runtime_probe(&net, [1, 28, 28], 1).unwrap();
    assert_eq!(one.stddev, None);
    assert_eq!(one.min, one.median);
    let many = runtime_probe(&net, [1, 28, 28], 100).unwrap();
    assert!(many.min <= many.median && many.median <= many.max);
    assert!(many.stddev.unwrap() >= 0.0);
    assert_eq!(many.counters, count_ops(&net, [1, 28, 28]).unwrap());
    assert!(runtime_probe(&net, [1, 28, 28], 0).is_err());
    assert!(runtime_probe(&net, [1, 27, 28], 3).is_err());
}

#[test]
fn reports_render() {
    let net = initialized(CNN1, [1, 28, 28], 0);
    let ops = count_ops(&net, [1, 28, 28]).unwrap();
    let csv = ops.to_csv();
    assert!(csv.lines().next().unwrap().starts_with("layer,"));
    assert_eq!(csv.lines().count(), 2 + net.layers().len());
    assert!(csv.lines().last().unwrap().starts_with("total,"));
    assert!(ops.to_markdown().contains("| total |"));
}
