use tode_core::check::tiny_model_config;
use tode_core::data::{generate_sample, RgbdSample, SynthConfig};
use tode_core::loss::LossConfig;
use tode_core::model::{ModelConfig, TodeNet};
use tode_core::train::{
    adamw_step, batch_gradients, decode_checkpoint, encode_checkpoint, lr_at, sample_gradients, train,
    LossHistory, OptimizerState, TrainConfig, Trainer,
};
use tode_core::tensor::Tensor;

fn samples(n: usize, size: usize) -> Vec<RgbdSample> {
    (0..n)
        .map(|i| generate_sample(&SynthConfig { width: size, height: size, seed: 50 + i as u64, ..Default::default() }).unwrap())
        .collect()
}

fn quick(steps: usize, batch: usize) -> TrainConfig {
    TrainConfig { batch_size: batch, max_steps: Some(steps), epochs: 1000, seed: 7, ..Default::default() }
}

#[test]
fn batch_gradient_is_mean_of_single_gradients() {
    let net = TodeNet::<f64>::new(tiny_model_config(), 1).unwrap();
    let data = samples(2, 32);
    let cfg = LossConfig::default();
    let (la, ga) = sample_gradients(&net, &data[0], &cfg).unwrap();
    let (lb, gb) = sample_gradients(&net, &data[1], &cfg).unwrap();
    let (lm, gm) = batch_gradients(&net, &data, &cfg, 1).unwrap();
    assert!((lm - 0.5 * (la + lb)).abs() < 1e-12);
    for ((a, b), m) in ga.iter().zip(&gb).zip(&gm) {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(m.data()) {
            assert!((0.5 * (x + y) - z).abs() <= 1e-12 * (1.0 + z.abs()));
        }
    }
    let (_, threaded) = batch_gradients(&net, &data, &cfg, 2).unwrap();
    for (a, b) in gm.iter().zip(&threaded) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn seeded_runs_are_bitwise_equal() {
    let data = samples(3, 32);
    let cfg = TrainConfig { augment: true, ..quick(4, 2) };
    let (net_a, hist_a) = train(&data, &tiny_model_config(), &cfg, &LossConfig::default()).unwrap();
    let (net_b, hist_b) = train(&data, &tiny_model_config(), &cfg, &LossConfig::default()).unwrap();
    assert_eq!(hist_a.to_csv(), hist_b.to_csv());
    let bits = |h: &LossHistory| h.records.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&hist_a), bits(&hist_b));
    assert_eq!(encode_checkpoint(net_a.params()).unwrap(), encode_checkpoint(net_b.params()).unwrap());
}

#[test]
fn dataset_order_does_not_matter() {
    let data = samples(4, 32);
    let mut reversed = data.clone();
    reversed.reverse();
    let cfg = quick(3, 2);
    let (a, ha) = train(&data, &tiny_model_config(), &cfg, &LossConfig::default()).unwrap();
    let (b, hb) = train(&reversed, &tiny_model_config(), &cfg, &LossConfig::default()).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(encode_checkpoint(a.params()).unwrap(), encode_checkpoint(b.params()).unwrap());
}

#[test]
fn step_count_follows_batches_and_limits() {
    let data = samples(3, 32);
    let one = TrainConfig { epochs: 1, batch_size: 16, ..Default::default() };
    let (_, h) = train(&data[..1], &tiny_model_config(), &one, &LossConfig::default()).unwrap();
    assert_eq!(h.records.len(), 1);
    let two_epochs = TrainConfig { epochs: 2, batch_size: 2, lr_milestones: vec![], ..Default::default() };
    let (_, h) = train(&data, &tiny_model_config(), &two_epochs, &LossConfig::default()).unwrap();
    assert_eq!(h.records.iter().map(|r| (r.step, r.epoch)).collect::<Vec<_>>(), vec![(1, 0), (2, 0), (3, 1), (4, 1)]);
    let (_, h) = train(&data, &tiny_model_config(), &quick(5, 1), &LossConfig::default()).unwrap();
    assert_eq!(h.records.len(), 5);
}

#[test]
fn checkpoint_lists_every_parameter_once() {
    let net = TodeNet::<f32>::new(ModelConfig::default(), 0).unwrap();
    let bytes = encode_checkpoint(net.params()).unwrap();
    let entries = decode_checkpoint::<f32>(&bytes).unwrap();
    let names: Vec<&str> = entries.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, net.params().names().iter().map(String::as_str).collect::<Vec<_>>());
    for ((_, t), orig) in entries.iter().zip(net.params().tensors()) {
        assert_eq!(t, orig);
    }
    let mut copy = TodeNet::<f32>::new(ModelConfig::default(), 99).unwrap();
    copy.params_mut().load_named(entries).unwrap();
    assert_eq!(encode_checkpoint(copy.params()).unwrap(), bytes);
}

#[test]
fn loss_decreases_on_a_fixed_batch() {
    let data = samples(2, 32);
    let cfg = TrainConfig { augment: false, lr: 3e-3, weight_decay: 0.0, ..quick(50, 2) };
    let (_, h) = train(&data, &tiny_model_config(), &cfg, &LossConfig::default()).unwrap();
    let l = h.losses();
    let head: f64 = l[..5].iter().sum::<f64>() / 5.0;
    let tail: f64 = l[45..].iter().sum::<f64>() / 5.0;
    assert!(tail < 0.9 * head, "first {head}, last {tail}");
}

#[test]
fn empty_mask_samples_still_train() {
    let mut s = samples(1, 32).remove(0);
    s.mask.fill(0);
    let mut trainer = Trainer::new(
        TodeNet::new(tiny_model_config(), 3).unwrap(),
        TrainConfig { augment: false, ..quick(1, 1) },
        LossConfig::default(),
    )
    .unwrap();
    let loss = trainer.step(&[s], 1e-3).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
}

#[test]
fn adamw_first_step_closed_form() {
    let mut p = vec![Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap()];
    let g = vec![Tensor::from_f64(&[1], &[0.5]).unwrap()];
    let mut st = OptimizerState::new(&p);
    adamw_step(&mut p, &g, &mut st, 0.1, 0.0).unwrap();
    assert!((p[0].item() - 0.9).abs() < 1e-7);
    assert_eq!(st.t, 1);
}

#[test]
fn schedule_examples() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg), 1e-3);
    assert!((lr_at(20, &cfg) - 1e-4).abs() < 1e-15);
}

#[test]
fn loss_csv_round_trip() {
    let data = samples(1, 32);
    let (_, h) = train(&data, &tiny_model_config(), &quick(3, 1), &LossConfig::default()).unwrap();
    let text = h.to_csv();
    assert!(text.starts_with("step,epoch,loss\n"));
    assert_eq!(LossHistory::parse_csv(&text).unwrap(), h);
}
