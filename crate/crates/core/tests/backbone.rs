use rand::Rng;
use trl_core::backbone::{frame_descriptor, front_end, init_backbone, tail, Stream};
use trl_core::config::BackboneConfig;
use trl_core::nn::{ParamStore, Session};
use trl_core::rng::stream;
use trl_core::Tensor;

fn store(cfg: &BackboneConfig, seed: u64) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    init_backbone(&mut s, cfg, seed).unwrap();
    s
}

fn frames(n: usize, seed: u64) -> Tensor<f64> {
    let mut r = stream(seed, "frames");
    Tensor::from_fn(&[n, 64, 64, 3], |_| r.gen_range(-1.0..1.0))
}

/// Front-end and both tails for `x`, returned as `(y, x_main, x_aligned)`.
fn run(p: &ParamStore<f64>, cfg: &BackboneConfig, x: &Tensor<f64>) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut s = Session::new(p, false, stream(0, "t"));
    let x = s.graph.constant(x.clone());
    let y = front_end(&mut s, cfg, x).unwrap();
    let xm = tail(&mut s, cfg, y, Stream::Main).unwrap();
    let xa = tail(&mut s, cfg, y, Stream::Aligned).unwrap();
    (s.graph.value(y).clone(), s.graph.value(xm).clone(), s.graph.value(xa).clone())
}

#[test]
fn default_shapes() {
    let cfg = BackboneConfig::default();
    let p = store(&cfg, 1);
    let (y, xm, xa) = run(&p, &cfg, &frames(2, 0));
    assert_eq!(y.shape(), &[2, 16, 16, 32]);
    assert_eq!(xm.shape(), &[2, 4, 4, 64]);
    assert_eq!(xa.shape(), &[2, 4, 4, 64]);
}

#[test]
fn zero_input_with_zero_biases_gives_zero_maps() {
    let cfg = BackboneConfig::default();
    let p = store(&cfg, 2);
    let (y, xm, _) = run(&p, &cfg, &Tensor::zeros(&[1, 64, 64, 3]));
    assert!(y.data().iter().all(|&v| v == 0.0));
    assert!(xm.data().iter().all(|&v| v == 0.0));
}

#[test]
fn wrong_input_size_is_rejected() {
    let cfg = BackboneConfig::default();
    let p = store(&cfg, 0);
    let mut s = Session::new(&p, false, stream(0, "t"));
    let x = s.graph.constant(Tensor::zeros(&[1, 32, 32, 3]));
    assert!(front_end(&mut s, &cfg, x).is_err());
}

#[test]
fn tails_have_disjoint_parameters() {
    let cfg = BackboneConfig::default();
    let p = store(&cfg, 3);
    let x = frames(2, 1);
    let (_, xm0, xa0) = run(&p, &cfg, &x);
    let mut q = p.clone();
    let mut r = stream(9, "perturb");
    for (name, t) in q.params.iter_mut() {
        if name.starts_with("tail.main.") {
            t.data_mut().iter_mut().for_each(|v| *v += r.gen_range(-0.1..0.1));
        }
    }
    let (_, xm1, xa1) = run(&q, &cfg, &x);
    assert_eq!(xa0, xa1);
    assert_ne!(xm0, xm1);
}

#[test]
fn constant_map_gives_constant_descriptor() {
    // D equal to the tail width means no projection.
    let cfg = BackboneConfig::default();
    let p = store(&cfg, 4);
    let mut s = Session::new(&p, false, stream(0, "t"));
    let x = s.graph.constant(Tensor::full(&[1, 4, 4, 64], 0.75));
    let f = frame_descriptor(&mut s, x, Stream::Main).unwrap();
    assert_eq!(s.graph.shape(f), &[1, 64]);
    assert!(s.graph.value(f).data().iter().all(|&v| v == 0.75));
}

#[test]
fn descriptor_width_follows_config() {
    for d in [8, 64, 100] {
        let cfg = BackboneConfig {
            descriptor_dim: d,
            ..BackboneConfig::default()
        };
        let p = store(&cfg, 5);
        let mut s = Session::new(&p, false, stream(0, "t"));
        let x = s.graph.constant(frames(3, 2));
        let y = front_end(&mut s, &cfg, x).unwrap();
        let xa = tail(&mut s, &cfg, y, Stream::Aligned).unwrap();
        let f = frame_descriptor(&mut s, xa, Stream::Aligned).unwrap();
        assert_eq!(s.graph.shape(f), &[3, d]);
    }
}

#[test]
fn frames_are_processed_independently() {
    let cfg = BackboneConfig {
        descriptor_dim: 16,
        ..BackboneConfig::default()
    };
    let p = store(&cfg, 6);
    let describe = |x: &Tensor<f64>| {
        let mut s = Session::new(&p, false, stream(0, "t"));
        let x = s.graph.constant(x.clone());
        let y = front_end(&mut s, &cfg, x).unwrap();
        let xm = tail(&mut s, &cfg, y, Stream::Main).unwrap();
        let f = frame_descriptor(&mut s, xm, Stream::Main).unwrap();
        s.graph.value(f).clone()
    };
    let x = frames(3, 3);
    let perm = [2, 0, 1];
    let permuted = Tensor::stack_leading(&perm.map(|i| x.index_leading(i))).unwrap();
    let (a, b) = (describe(&x), describe(&permuted));
    for (k, &i) in perm.iter().enumerate() {
        assert_eq!(b.index_leading(k), a.index_leading(i));
    }
    // Equal frames give equal descriptors.
    let twice = Tensor::stack_leading(&[x.index_leading(0), x.index_leading(0)]).unwrap();
    let d = describe(&twice);
    assert_eq!(d.index_leading(0), d.index_leading(1));
}

#[test]
fn stream_gradients_stay_in_their_stream() {
    let cfg = BackboneConfig {
        descriptor_dim: 16,
        ..BackboneConfig::default()
    };
    let p = store(&cfg, 7);
    for (own, other) in [(Stream::Main, Stream::Aligned), (Stream::Aligned, Stream::Main)] {
        let mut s = Session::new(&p, true, stream(0, "t"));
        let x = s.graph.constant(frames(2, 4));
        let y = front_end(&mut s, &cfg, x).unwrap();
        let xo = tail(&mut s, &cfg, y, own).unwrap();
        let _ = tail(&mut s, &cfg, y, other).unwrap();
        let f = frame_descriptor(&mut s, xo, own).unwrap();
        let loss = s.graph.sum(f);
        s.graph.backward(loss).unwrap();
        let grads = s.grads();
        let tag = |st: Stream| format!("tail.{}.", st.tag());
        assert!(grads.iter().any(|(k, g)| k.starts_with("front.") && g.max_abs() > 0.0));
        assert!(grads.iter().any(|(k, g)| k.starts_with(&tag(own)) && g.max_abs() > 0.0));
        assert!(grads
            .iter()
            .filter(|(k, _)| k.starts_with(&tag(other)))
            .all(|(_, g)| g.max_abs() == 0.0));
    }
}
