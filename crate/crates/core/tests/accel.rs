use ehdl_core::accel_sim::*;
use ehdl_core::fxp::{OverflowFlag, CQ15, Q15};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64;
use rustfft::{FftDirection as RDir, FftPlanner};

fn oracle(x: &[CQ15], dir: FftDirection) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|c| Complex64::new(c.re.to_f64(), c.im.to_f64())).collect();
    let rd = match dir {
        FftDirection::Forward => RDir::Forward,
        FftDirection::Inverse => RDir::Inverse,
    };
    FftPlanner::new().plan_fft(buf.len(), rd).process(&mut buf);
    if dir == FftDirection::Inverse {
        let n = buf.len() as f64;
        buf.iter_mut().for_each(|v| *v /= n);
    }
    buf
}

fn random_signal(rng: &mut ChaCha8Rng, n: usize, amp: f64) -> Vec<CQ15> {
    (0..n)
        .map(|_| CQ15 { re: Q15::from_f64(rng.random_range(-amp..amp)), im: Q15::from_f64(rng.random_range(-amp..amp)) })
        .collect()
}

fn max_err(a: &[CQ15], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.re.to_f64() - y.re).abs().max((x.im.to_f64() - y.im).abs())).fold(0.0, f64::max)
}

/// Rounding budget for a transform of length `n`: half an LSB per stage per
/// component, doubled for twiddle error.
fn budget(n: usize) -> f64 {
    (n.trailing_zeros() as f64 + 1.0) * 2f64.powi(-15)
}

#[test]
fn impulse_and_constant_examples() {
    let mut v = vec![CQ15::new(8192, 0), CQ15::ZERO, CQ15::ZERO, CQ15::ZERO];
    fft_in_place(&mut v, FftDirection::Forward).unwrap();
    assert_eq!(v, vec![CQ15::new(8192, 0); 4]);

    let c = Q15(6000);
    let scaled: Vec<CQ15> = ehdl_core::bcm_kernel::scale_down(&[c; 4], 4).into_iter().map(CQ15::real).collect();
    let mut s = scaled.clone();
    let f = fft_in_place(&mut s, FftDirection::Forward).unwrap();
    assert!(f.is_clean());
    assert_eq!(s[0], CQ15::new(6000, 0));
    assert!(s[1..].iter().all(|b| *b == CQ15::ZERO));
}

#[test]
fn forward_and_inverse_match_double_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [4, 8, 16, 32, 64, 128, 256] {
        for _ in 0..50 {
            let x = random_signal(&mut rng, n, 1.0 / n as f64);
            let mut f = x.clone();
            assert!(fft_in_place(&mut f, FftDirection::Forward).unwrap().is_clean());
            assert!(max_err(&f, &oracle(&x, FftDirection::Forward)) <= budget(n) * n as f64 / 4.0 + 2f64.powi(-15));
            let y = random_signal(&mut rng, n, 0.9);
            let mut g = y.clone();
            assert!(fft_in_place(&mut g, FftDirection::Inverse).unwrap().is_clean());
            assert!(max_err(&g, &oracle(&y, FftDirection::Inverse)) <= budget(n));
        }
    }
}

#[test]
fn inverse_of_forward_recovers_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for n in [4, 8, 16, 32, 64] {
        for _ in 0..200 {
            let x = random_signal(&mut rng, n, 1.0 / n as f64);
            let mut v = x.clone();
            let mut flag = fft_in_place(&mut v, FftDirection::Forward).unwrap();
            flag |= fft_in_place(&mut v, FftDirection::Inverse).unwrap();
            if !flag.is_clean() {
                continue;
            }
            let err = x.iter().zip(&v).map(|(a, b)| (a.re.0 as i32 - b.re.0 as i32).abs().max((a.im.0 as i32 - b.im.0 as i32).abs())).max().unwrap();
            assert!(err as f64 / 32768.0 <= n as f64 * 2f64.powi(-12), "n={n} err={err}");
        }
    }
}

#[test]
fn linearity_and_parseval() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in [8, 16, 32, 64] {
        let amp = 0.5 / n as f64;
        for _ in 0..100 {
            let x = random_signal(&mut rng, n, amp);
            let y = random_signal(&mut rng, n, amp);
            let sum: Vec<CQ15> = x.iter().zip(&y).map(|(a, b)| CQ15::new(a.re.0 + b.re.0, a.im.0 + b.im.0)).collect();
            let (mut fx, mut fy, mut fs) = (x.clone(), y.clone(), sum.clone());
            let mut flag = OverflowFlag::CLEAN;
            for v in [&mut fx, &mut fy, &mut fs] {
                flag |= fft_in_place(v, FftDirection::Forward).unwrap();
            }
            assert!(flag.is_clean());
            let tol = 2.0 * budget(n) * n as f64 / 4.0 + 2f64.powi(-14);
            for i in 0..n {
                let re = fx[i].re.to_f64() + fy[i].re.to_f64() - fs[i].re.to_f64();
                let im = fx[i].im.to_f64() + fy[i].im.to_f64() - fs[i].im.to_f64();
                assert!(re.abs().max(im.abs()) <= tol);
            }
            let e_t: f64 = x.iter().map(|c| c.re.to_f64().powi(2) + c.im.to_f64().powi(2)).sum();
            let e_f: f64 = fx.iter().map(|c| c.re.to_f64().powi(2) + c.im.to_f64().powi(2)).sum::<f64>() / n as f64;
            assert!((e_t - e_f).abs() <= 4.0 * n as f64 * amp * budget(n) + 1e-7, "n={n} {e_t} vs {e_f}");
        }
    }
}

#[test]
fn mac_examples() {
    let a = vec![32767i16; 9];
    let b = vec![3641i16; 9];
    let wide = mac_wide(&a, &b);
    assert_eq!(wide, 9 * 32767 * 3641);
    let (q, f) = mac_readout(wide, 0);
    // integer oracle: round half up then saturate
    let want = ((wide + (1 << 14)) >> 15).min(32767);
    assert_eq!(q.0 as i64, want);
    assert_eq!(f.saturated, (wide + (1 << 14)) >> 15 > 32767);
    assert_eq!(mac_readout(mac_wide(&[16384], &[16384]), 0).0, Q15(8192));

    let mut dev = Device::new(&DeviceConfig::default());
    dev.mem.sram.write_i16s(0, &[16384]).unwrap();
    dev.mem.sram.write_i16s(2, &[16384]).unwrap();
    assert_eq!(dev.lea_mac(0, 2, 1).unwrap().0, Q15(8192));
    assert_eq!(dev.ledger.ops(OpKind::Mac), 1);
}

#[test]
fn dma_copy_cost_and_contents() {
    let mut dev = Device::new(&DeviceConfig::default());
    let vals: Vec<i16> = (0..256).map(|i| (i * 97 - 9000) as i16).collect();
    dev.mem.fram.write_i16s(1000, &vals).unwrap();
    dev.dma_copy(Loc::fram(1000), Loc::sram(0), 256).unwrap();
    let c = &dev.cost;
    assert_eq!(dev.ledger.component(Component::Dma).energy_fj, c.dma.fixed.energy_fj + 256 * c.dma.per_elem.energy_fj);
    assert_eq!(dev.ledger.component(Component::FramRead).energy_fj, 512 * c.fram.read_fj);
    assert_eq!(dev.ledger.component(Component::Sram).energy_fj, 512 * c.sram.write_fj);
    let mut back = vec![0i16; 256];
    dev.mem.sram.read_i16s(0, &mut back).unwrap();
    assert_eq!(back, vals);
    assert!(c.cpu_copy.times(1).energy_fj < c.dma.for_len(1).energy_fj);
    assert!(matches!(
        dev.dma_copy(Loc::fram(DeviceConfig::default().fram_bytes - 2), Loc::sram(0), 2),
        Err(SimError::Memory(_))
    ));
}

#[test]
fn fft_op_errors() {
    let mut dev = Device::new(&DeviceConfig::default());
    assert_eq!(dev.lea_fft(0, 12, FftDirection::Forward), Err(SimError::NotPowerOfTwo(12)));
    assert!(matches!(dev.lea_fft(4000, 64, FftDirection::Forward), Err(SimError::BufferTooLarge { .. })));
    dev.mem.sram.write_i16s(0, &vec![0; 512]).unwrap();
    dev.lea_fft(0, 256, FftDirection::Inverse).unwrap();
    assert_eq!(dev.ledger.ops(OpKind::Ifft), 1);
    assert_eq!(dev.ledger.component(Component::Lea).energy_fj, dev.cost.ifft.for_len(256).energy_fj);
}

#[derive(Debug, Clone)]
enum Action {
    Fft(usize),
    Mac(usize),
    Mpy(usize),
    Add(usize),
    Dma(usize),
    CpuCopy(usize),
    Store(usize),
}

fn action() -> impl Strategy<Value = Action> {
    prop_oneof![
        (2u32..7).prop_map(|b| Action::Fft(1 << b)),
        (1usize..200).prop_map(Action::Mac),
        (1usize..200).prop_map(Action::Mpy),
        (1usize..200).prop_map(Action::Add),
        (1usize..300).prop_map(Action::Dma),
        (1usize..300).prop_map(Action::CpuCopy),
        (1usize..50).prop_map(Action::Store),
    ]
}

proptest! {
    #[test]
    fn ledger_conserves_and_counts(actions in proptest::collection::vec(action(), 1..40)) {
        let mut dev = Device::new(&DeviceConfig::default());
        let mut expect = [0u64; 6];
        let mut last = 0;
        for a in &actions {
            match *a {
                Action::Fft(n) => { dev.lea_fft(0, n, FftDirection::Forward).unwrap(); expect[0] += 1; }
                Action::Mac(n) => { dev.lea_mac(0, 1024, n).unwrap(); expect[2] += 1; }
                Action::Mpy(n) => { dev.lea_mpy(0, 1024, 2048, n).unwrap(); expect[3] += 1; }
                Action::Add(n) => { dev.lea_add(0, 1024, 2048, n).unwrap(); expect[4] += 1; }
                Action::Dma(n) => { dev.dma_copy(Loc::fram(0), Loc::sram(4096), n).unwrap(); expect[5] += 1; }
                Action::CpuCopy(n) => dev.cpu_copy(Loc::sram(0), Loc::fram(0), n).unwrap(),
                Action::Store(n) => dev.cpu_store(Loc::fram(10), &vec![1; n]).unwrap(),
            }
            let t = dev.ledger.total();
            prop_assert_eq!(t, dev.ledger.components_sum());
            prop_assert!(t.energy_fj > last);
            last = t.energy_fj;
        }
        for (k, want) in OpKind::ALL.iter().zip(expect) {
            prop_assert_eq!(dev.ledger.ops(*k), want);
        }
    }

    #[test]
    fn movement_policy_is_cheapest(n in 1usize..=1000) {
        let c = CostModel::default();
        let dma = c.dma.for_len(n).energy_fj;
        let cpu = c.cpu_copy.times(n as u64).energy_fj;
        match movement_policy(&c, n) {
            Movement::Dma => prop_assert!(dma <= cpu),
            Movement::Cpu => prop_assert!(cpu <= dma),
        }
    }
}

#[test]
fn movement_threshold() {
    let c = CostModel::default();
    let t = c.dma_threshold();
    assert_eq!(t, 8);
    assert_eq!(movement_policy(&c, 1), Movement::Cpu);
    assert_eq!(movement_policy(&c, 256), Movement::Dma);
    assert_eq!(movement_policy(&c, t - 1), Movement::Cpu);
    assert_eq!(movement_policy(&c, t), Movement::Dma);
}

#[test]
fn cost_config_roundtrip() {
    let c = CostModel::default();
    assert_eq!(CostModel::parse(&c.to_config_string()).unwrap(), c);
    assert!(c.checkpoint_write_cost_fj <= 33_000_000_000);
}
