use num_complex::Complex;
use proptest::prelude::*;

use xlcnet::channel::{far_steering, near_steering, norm, rayleigh_distance, ArrayGeometry};
use xlcnet::compression::{
    compression_ratio, dequantize, pack_codes, prune, quantize_layer, unpack_codes,
};
use xlcnet::config::ExperimentConfig;
use xlcnet::estimation::{grid_to_vector, nmse, reshape_to_grid, square_factorization, Grid};
use xlcnet::io::{decode_dataset, encode_dataset};
use xlcnet::nn::{ConvLayer, Tensor4};
use xlcnet::xlcnet::{flops, Dataset, Model, ParamConvention, XlcnetConfig};

fn f32_ulp(w: f32) -> f64 {
    let a = w.abs().max(f32::MIN_POSITIVE);
    (f32::from_bits(a.to_bits() + 1) - a) as f64
}

fn single_layer(weights: Vec<f64>) -> Model<f64> {
    let n = weights.len();
    let mut layer = ConvLayer::<f64>::zeros(1, 1, 1, false, false).unwrap();
    layer.kernels = Tensor4::from_vec([n, 1, 1, 1], weights).unwrap();
    layer.bias = vec![0.0; n];
    Model {
        layers: vec![layer],
        rows: 1,
        cols: 1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn steering_vectors_have_unit_norm(
        m in 1usize..300,
        phi in -std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2,
        r in 0.5f64..500.0,
    ) {
        let g = ArrayGeometry::new(m, 0.01).unwrap();
        prop_assert!((norm(&far_steering(phi, &g).unwrap()) - 1.0).abs() < 1e-12);
        prop_assert!((norm(&near_steering(phi, r, &g).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rayleigh_distance_is_quadratic(m in 1usize..5000, lambda in 1e-3f64..1.0) {
        let a = rayleigh_distance(&ArrayGeometry::new(m, lambda).unwrap()).unwrap();
        let b = rayleigh_distance(&ArrayGeometry::new(2 * m, lambda).unwrap()).unwrap();
        prop_assert!((b / a - 4.0).abs() < 1e-12);
    }

    #[test]
    fn codes_pack_and_unpack(bits in 1u8..=32, raw in prop::collection::vec(any::<u32>(), 0..200)) {
        let mask = if bits == 32 { u32::MAX } else { (1u32 << bits) - 1 };
        let codes: Vec<u32> = raw.iter().map(|c| c & mask).collect();
        let packed = pack_codes(&codes, bits);
        prop_assert_eq!(packed.len(), (codes.len() * bits as usize).div_ceil(8));
        prop_assert_eq!(unpack_codes(&packed, bits, codes.len()).unwrap(), codes);
    }

    #[test]
    fn quantization_round_trip_bound(
        bits in 1u8..=32,
        weights in prop::collection::vec(-1.0f32..1.0, 2..300),
        keep in prop::collection::vec(any::<bool>(), 300),
    ) {
        let n = weights.len();
        let mut retained: Vec<bool> = keep[..n].to_vec();
        retained[0] = true;
        let k = Tensor4::from_vec([n, 1, 1, 1], weights.clone()).unwrap();
        let q = quantize_layer(&k, &retained, bits).unwrap();
        let codes = q.codes().unwrap();
        prop_assert!(codes.iter().all(|&c| (c as u64) <= q.max_code()));
        let back = dequantize::<f32>(&q).unwrap();
        let s = q.scale as f64;
        for i in 0..n {
            let (w, d) = (weights[i], back.data()[i]);
            if !retained[i] {
                prop_assert_eq!(d, 0.0);
            } else if q.constant.is_none() {
                prop_assert!(q.scale > 0.0);
                prop_assert!(((w - d).abs() as f64) <= s / 2.0 + 4.0 * f32_ulp(w), "w={} d={} S={}", w, d, s);
            } else {
                prop_assert_eq!(d, w);
            }
        }
    }

    #[test]
    fn zero_survives_quantization(bits in 1u8..=32, lo in -2.0f32..-0.01, hi in 0.01f32..2.0, mid in -1.0f32..1.0) {
        let k = Tensor4::from_vec([4, 1, 1, 1], vec![lo, 0.0, hi, mid]).unwrap();
        let q = quantize_layer(&k, &[true; 4], bits).unwrap();
        prop_assert_eq!(q.codes().unwrap()[1] as i64, q.zero_point);
        prop_assert_eq!(dequantize::<f32>(&q).unwrap().data()[1], 0.0);
    }

    #[test]
    fn pruning_follows_order_statistics(
        mags in prop::collection::btree_set(1u32..1_000_000, 4..200),
        signs in prop::collection::vec(any::<bool>(), 200),
        kappa in 0.05f64..0.95,
    ) {
        let weights: Vec<f64> = mags
            .iter()
            .zip(&signs)
            .map(|(&m, &s)| if s { m as f64 * 1e-6 } else { -(m as f64) * 1e-6 })
            .collect();
        let n = weights.len();
        prop_assume!((kappa * n as f64).floor() >= 1.0);
        let model = single_layer(weights.clone());
        let (pruned, mask, theta) = prune(&model, kappa).unwrap();
        for (i, &w) in weights.iter().enumerate() {
            if mask.layer(0)[i] {
                prop_assert!(w.abs() >= theta);
                prop_assert_eq!(pruned.layers[0].kernels.data()[i], w);
            } else {
                prop_assert!(w.abs() < theta);
                prop_assert_eq!(pruned.layers[0].kernels.data()[i], 0.0);
            }
        }
        let expected = (kappa * n as f64).floor() as usize - 1;
        prop_assert_eq!(mask.pruned(), expected);
    }

    #[test]
    fn ratio_formula(kappa in 0.0f64..0.99, bits in 1u8..=32) {
        let g = compression_ratio(kappa, bits).unwrap();
        prop_assert!((g * bits as f64 * (1.0 - kappa) - 32.0).abs() < 1e-9);
    }

    #[test]
    fn macs_equal_antennas_times_kernels(
        layers in 2usize..6,
        hidden in 1usize..12,
        kernel in prop::sample::select(vec![1usize, 3, 5]),
        rows in 1usize..8,
        cols in 1usize..8,
    ) {
        let cfg = XlcnetConfig { layers, hidden, kernel, io_channels: 2, rows, cols };
        let m = Model::<f32>::build(&cfg, 1).unwrap();
        let n_w = m.count_params(ParamConvention::KernelsOnly);
        prop_assert_eq!(flops(&m, rows * cols, 0.0), (rows * cols * n_w) as f64);
        prop_assert_eq!(m.dense_macs(), (rows * cols * n_w) as u64);
    }

    #[test]
    fn nmse_is_relative_error_energy(
        h in prop::collection::vec(-1.0f64..1.0, 8),
        e in prop::collection::vec(-1.0f64..1.0, 8),
    ) {
        let energy: f64 = h.iter().map(|v| v * v).sum();
        prop_assume!(energy > 1e-6);
        let truth = Grid::from_vec(2, 2, h.clone()).unwrap();
        let est = Grid::from_vec(2, 2, h.iter().zip(&e).map(|(a, b)| a + b).collect()).unwrap();
        let err: f64 = e.iter().map(|v| v * v).sum();
        prop_assert!((nmse(&truth, &est).unwrap() - err / energy).abs() < 1e-12 * (1.0 + err / energy));
    }

    #[test]
    fn grid_reshape_round_trips(m in 4usize..400, seed in any::<u64>()) {
        prop_assume!(square_factorization(m).is_ok());
        let (rows, cols) = square_factorization(m).unwrap();
        prop_assert!(rows <= cols);
        let h: Vec<Complex<f64>> = (0..m)
            .map(|i| Complex::new(((i as u64 ^ seed) % 97) as f64, -(i as f64)))
            .collect();
        let g = reshape_to_grid(&h, rows, cols).unwrap();
        prop_assert_eq!(g.frobenius_sq(), h.iter().map(|z| z.norm_sqr()).sum::<f64>());
        prop_assert_eq!(grid_to_vector(&g), h);
    }

    #[test]
    fn dataset_bytes_round_trip(
        count in 1usize..6,
        values in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 6 * 24),
        tag in any::<[u8; 6]>(),
    ) {
        let mut d = Dataset::new(3, 4);
        for i in 0..count {
            let g = &values[i * 24..(i + 1) * 24];
            d.push(i as f32 - 0.5, g, &g.iter().map(|v| v * 0.5).collect::<Vec<_>>()).unwrap();
        }
        let mut buf = Vec::new();
        encode_dataset(&mut buf, &d, tag).unwrap();
        let (back, header) = decode_dataset(&buf[..]).unwrap();
        prop_assert_eq!(header.tag, tag);
        prop_assert_eq!(back, d);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), epochs in 1usize..500, lr in 1e-6f64..1.0, bits in 1u8..=32) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.epochs = epochs;
        cfg.learning_rate = lr;
        cfg.bits = bits;
        let back = ExperimentConfig::parse(&cfg.render()).unwrap();
        prop_assert_eq!(back.config_hash(), cfg.config_hash());
        prop_assert_eq!(back, cfg);
    }
}
