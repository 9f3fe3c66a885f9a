use fedldf_core::aggregation::{
    aggregate_fedavg, aggregate_layerwise, client_dropout_selection, layer_divergence,
    random_layer_selection, select_top_n, DivergenceMatrix, SelectionMatrix,
};
use fedldf_core::analysis::{
    asymptotic_gap_closed_form, asymptotic_gap_recursion_form, bound_a, bound_b, bound_gap,
    convergence_condition, convergence_threshold, estimate_constants, BoundParams,
};
use fedldf_core::datasets::idx;
use fedldf_core::nn::LayeredModel;
use fedldf_core::rng::seeded;
use fedldf_core::trace::TraceRecord;
use proptest::prelude::*;

fn models(seed: u64, count: usize, dims: &[usize]) -> Vec<LayeredModel> {
    let mut rng = seeded(seed);
    (0..count)
        .map(|_| LayeredModel::init(dims, &mut rng).unwrap())
        .collect()
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..6, 2..5)
}

prop_compose! {
    fn bound_params()(
        k in 1usize..60,
        beta in 0.0f64..5.0,
        xi1 in 0.0f64..3.0,
        g in 0.0f64..3.0,
        eta in 0.001f64..0.5,
        layers in 1usize..8,
        xi2_frac in 0.001f64..0.999,
        n_frac in 0.0f64..1.0,
    ) -> BoundParams {
        let n = 1 + ((k - 1) as f64 * n_frac).round() as usize;
        let mut p = BoundParams { beta, xi1, xi2: 1.0, g, eta, layers, n, k };
        p.xi2 = xi2_frac * convergence_threshold(&p);
        p
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn all_ones_selection_reduces_to_fedavg(
        seed in any::<u64>(),
        dims in dims_strategy(),
        sizes in prop::collection::vec(1usize..500, 1..8),
    ) {
        let ms = models(seed, sizes.len(), &dims);
        let sel = SelectionMatrix::all_ones(dims.len() - 1, sizes.len());
        let a = aggregate_layerwise(&ms, &sizes, &sel).unwrap();
        let b = aggregate_fedavg(&ms, &sizes).unwrap();
        for (x, y) in a.flatten().iter().zip(b.flatten()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn selection_rows_sum_to_n(
        seed in any::<u64>(),
        layers in 1usize..6,
        clients in 1usize..12,
        frac in 0.0f64..1.0,
    ) {
        let n = 1 + ((clients - 1) as f64 * frac) as usize;
        let mut rng = seeded(seed);
        let values: Vec<Vec<f64>> = (0..layers)
            .map(|_| (0..clients).map(|_| rand::Rng::random_range(&mut rng, 0.0..1.0)).collect())
            .collect();
        let div = DivergenceMatrix::new(values, (0..clients).collect()).unwrap();
        let built = [
            select_top_n(&div, n).unwrap(),
            random_layer_selection(layers, clients, n, &mut rng).unwrap(),
            client_dropout_selection(layers, clients, n, &mut rng).unwrap(),
        ];
        for sel in &built {
            prop_assert!(sel.selected_per_layer().iter().all(|&s| s == n));
        }
        prop_assert!(SelectionMatrix::all_ones(layers, clients).selected_per_layer().iter().all(|&s| s == clients));
    }

    #[test]
    fn aggregate_stays_within_selected_range(
        seed in any::<u64>(),
        dims in dims_strategy(),
        sizes in prop::collection::vec(1usize..100, 2..7),
        n_frac in 0.0f64..1.0,
    ) {
        let k = sizes.len();
        let n = 1 + ((k - 1) as f64 * n_frac) as usize;
        let ms = models(seed, k, &dims);
        let mut rng = seeded(seed ^ 1);
        let sel = random_layer_selection(dims.len() - 1, k, n, &mut rng).unwrap();
        let agg = aggregate_layerwise(&ms, &sizes, &sel).unwrap();
        for (l, layer) in agg.layers().iter().enumerate() {
            let chosen: Vec<&LayeredModel> = (0..k).filter(|&c| sel.get(l, c)).map(|c| &ms[c]).collect();
            for (p, v) in layer.params().enumerate() {
                let vals: Vec<f64> = chosen.iter().map(|m| *m.layers()[l].params().nth(p).unwrap()).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(*v >= lo - 1e-15 && *v <= hi + 1e-15, "{v} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn divergence_is_a_metric(seed in any::<u64>(), dims in dims_strategy()) {
        let ms = models(seed, 3, &dims);
        let (a, b, c) = (&ms[0], &ms[1], &ms[2]);
        let ab = layer_divergence(a, b).unwrap();
        let ba = layer_divergence(b, a).unwrap();
        let bc = layer_divergence(b, c).unwrap();
        let ac = layer_divergence(a, c).unwrap();
        prop_assert_eq!(&ab, &ba);
        prop_assert!(layer_divergence(a, a).unwrap().iter().all(|&d| d == 0.0));
        for l in 0..ab.len() {
            prop_assert!(ab[l] > 0.0);
            prop_assert!(ac[l] <= ab[l] + bc[l] + 1e-12);
        }
    }

    #[test]
    fn top_n_dominates_unselected(
        values in prop::collection::vec(prop::collection::vec(0u8..6, 5), 1..5),
        n in 1usize..=5,
    ) {
        // small integer values force plenty of ties
        let rows: Vec<Vec<f64>> = values.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
        let div = DivergenceMatrix::new(rows.clone(), (0..5).collect()).unwrap();
        let sel = select_top_n(&div, n).unwrap();
        for (l, row) in rows.iter().enumerate() {
            let picked = (0..5).filter(|&c| sel.get(l, c)).map(|c| row[c]);
            let rest = (0..5).filter(|&c| !sel.get(l, c)).map(|c| row[c]);
            let min_sel = picked.fold(f64::INFINITY, f64::min);
            let max_rest = rest.fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(min_sel >= max_rest);
        }
    }

    #[test]
    fn bound_recursion_identity(p in bound_params(), t in 0u32..200, x in 0.0f64..10.0) {
        let next = bound_gap(&p, t + 1, x).value;
        let step = bound_a(&p) * bound_gap(&p, t, x).value + bound_b(&p);
        prop_assert!((next - step).abs() <= 1e-12, "{next} vs {step}");
    }

    #[test]
    fn condition_implies_contraction_for_every_n(p in bound_params()) {
        prop_assert!(convergence_condition(&p));
        for n in 1..=p.k {
            prop_assert!(bound_a(&p.with_n(n)) < 1.0);
        }
    }

    #[test]
    fn gap_shrinks_as_more_clients_upload(p in bound_params(), t in 0u32..100, x in 0.0f64..10.0) {
        let mut prev_bound = f64::INFINITY;
        let mut prev_limit = f64::INFINITY;
        for n in 1..=p.k {
            let q = p.with_n(n);
            let b = bound_gap(&q, t, x).value;
            let lim = asymptotic_gap_recursion_form(&q).unwrap();
            prop_assert!(b <= prev_bound && lim <= prev_limit);
            prev_bound = b;
            prev_limit = lim;
        }
        prop_assert_eq!(asymptotic_gap_recursion_form(&p.with_n(p.k)).unwrap(), 0.0);
    }

    #[test]
    fn limit_is_zero_only_with_full_upload(p in bound_params()) {
        prop_assume!(p.g > 0.0 || p.xi1 > 0.0);
        for n in 1..=p.k {
            let gap = asymptotic_gap_closed_form(&p.with_n(n)).unwrap();
            if n == p.k {
                prop_assert!(gap.abs() <= 1e-15);
            } else {
                prop_assert!(gap > 0.0);
            }
        }
    }

    #[test]
    fn both_limit_expressions_agree(p in bound_params()) {
        let a = asymptotic_gap_closed_form(&p).unwrap();
        let b = asymptotic_gap_recursion_form(&p).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0), "{a} vs {b}");
    }

    #[test]
    fn estimated_constants_dominate_their_trace(
        norms in prop::collection::vec((0.0f64..5.0, prop::collection::vec(0.0f64..5.0, 6)), 2..20),
    ) {
        let trace: Vec<TraceRecord> = norms
            .iter()
            .enumerate()
            .map(|(i, (g, cl))| TraceRecord {
                round: i + 1,
                eta: 0.1,
                top_n: 1,
                clients_per_round: 3,
                layer_count: 2,
                local_steps: 1,
                participants: vec![0, 1, 2],
                client_sizes: vec![4, 4, 4],
                global_grad_norm: *g,
                client_layer_grad_norms: cl.chunks(2).map(|c| c.to_vec()).collect(),
                shadow_gaps: None,
                global_loss: 1.0,
                shadow_loss: None,
                step_norm: None,
                grad_diff_norm: None,
            })
            .collect();
        let est = estimate_constants(&trace).unwrap();
        prop_assert!(est.xi1 >= 0.0 && est.xi2 > 0.0);
        for r in &trace {
            let x = r.global_grad_norm * r.global_grad_norm;
            prop_assert!(x <= est.g * est.g);
            for v in r.client_layer_grad_norms.iter().flatten() {
                prop_assert!(v * v <= est.xi1 + est.xi2 * x);
            }
        }
    }

    #[test]
    fn idx_round_trip(
        rows in 1usize..6,
        cols in 1usize..6,
        images in prop::collection::vec(prop::collection::vec(any::<u8>(), 36), 0..6),
    ) {
        let imgs: Vec<Vec<u8>> = images.iter().map(|i| i[..rows * cols].to_vec()).collect();
        let parsed = idx::parse_images(&idx::encode_images(rows, cols, &imgs)).unwrap();
        prop_assert_eq!(parsed.count, imgs.len());
        prop_assert_eq!(parsed.pixels, imgs.concat());
        let labels: Vec<u8> = imgs.iter().map(|i| i[0]).collect();
        prop_assert_eq!(idx::parse_labels(&idx::encode_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn idx_parsers_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
        let _ = idx::parse_images(&bytes);
        let _ = idx::parse_labels(&bytes);
    }
}
