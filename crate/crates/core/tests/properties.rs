use proptest::prelude::*;

use tjstg_core::head::{self, LossWeights};
use tjstg_core::jtg::{self, AttentionVars, InterleaveOrder, InterleavedSequence};
use tjstg_core::nn::{LinearVars, MlpVars};
use tjstg_core::synth::{gen_scene, TaskConfig, World};
use tjstg_core::tensor::{js_divergence, softmax, Tape, Tensor};
use tjstg_core::train::{lr_schedule, TrainConfig};
use tjstg_core::tsg;

fn matrix(rows: usize, cols: usize, scale: f64) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-scale..scale, rows * cols).prop_map(move |d| Tensor::new(vec![rows, cols], d).unwrap())
}

fn simplex(n: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-8.0f64..8.0, n).prop_map(|x| softmax(&Tensor::row_vector(&x)))
}

fn order() -> impl Strategy<Value = InterleaveOrder> {
    prop::sample::select(InterleaveOrder::ALL.to_vec())
}

fn mlp(t: &mut Tape, d: usize, seed: u64) -> MlpVars {
    let mut x = seed | 1;
    let mut next = |r: usize, c: usize| {
        let data = (0..r * c)
            .map(|_| {
                x ^= x << 13;
                x ^= x >> 7;
                x ^= x << 17;
                (x >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            })
            .collect();
        t.constant(Tensor::new(vec![r, c], data).unwrap())
    };
    MlpVars {
        hidden: LinearVars { w: next(d, d), b: next(1, d) },
        out: LinearVars { w: next(d, d), b: next(1, d) },
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_simplexes(x in matrix(3, 7, 50.0)) {
        let s = softmax(&x);
        for r in 0..3 {
            let row = s.row(r);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(x in matrix(1, 9, 20.0), c in -100.0f64..100.0) {
        let a = softmax(&x);
        let b = softmax(&x.map(|v| v + c));
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-12);
        }
        prop_assert_eq!(a.argmax(), b.argmax());
    }

    #[test]
    fn question_scores_are_simplex_and_shift_stable(h in matrix(1, 6, 2.0), f in matrix(5, 6, 2.0)) {
        let mut t = Tape::new();
        let (hv, fv) = (t.constant(h), t.constant(f));
        let s = tsg::question_contribution_scores(&mut t, hv, fv).unwrap();
        prop_assert!((t.value(s).sum() - 1.0).abs() < 1e-9);
        let (idx, tgt) = tsg::select_target(&mut t, s, fv).unwrap();
        prop_assert_eq!(idx, t.value(s).argmax());
        prop_assert_eq!(t.value(tgt).data(), t.value(fv).row(idx));
    }

    #[test]
    fn js_is_symmetric_and_bounded(p in simplex(6), q in simplex(6)) {
        let a = js_divergence(&p, &q).unwrap();
        let b = js_divergence(&q, &p).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=std::f64::consts::LN_2 + 1e-12).contains(&a));
        prop_assert!(js_divergence(&p, &p).unwrap().abs() < 1e-15);
    }

    #[test]
    fn interleave_round_trips(v in matrix(4, 3, 5.0), a in matrix(4, 3, 5.0), o in order()) {
        let seq = InterleavedSequence::new(&v, &a, o).unwrap();
        let (v2, a2) = seq.deinterleave().unwrap();
        prop_assert_eq!(&v2, &v);
        prop_assert_eq!(&a2, &a);
        let mut t = Tape::new();
        let (vv, av) = (t.constant(v), t.constant(a));
        let on_tape = jtg::interleave(&mut t, vv, av, o).unwrap();
        prop_assert_eq!(t.value(on_tape), &seq.f_av);
    }

    #[test]
    fn threshold_is_monotone(p in simplex(12), t1 in 0.0f64..0.3, t2 in 0.0f64..0.3) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let mut t = Tape::new();
        let s = t.constant(p.clone());
        let (g_lo, keep_lo) = tsg::threshold_mask(&mut t, s, lo).unwrap();
        let (g_hi, keep_hi) = tsg::threshold_mask(&mut t, s, hi).unwrap();
        for i in 0..12 {
            prop_assert!(!keep_hi[i] || keep_lo[i]);
            for g in [g_lo, g_hi] {
                let x = t.value(g).data()[i];
                prop_assert!((0.0..=1.0).contains(&x) && x <= p.data()[i]);
            }
        }
    }

    #[test]
    fn temporal_attention_is_permutation_equivariant(
        h in matrix(1, 4, 1.0),
        f in matrix(6, 4, 1.0),
        wq in matrix(4, 4, 1.0),
        wk in matrix(4, 4, 1.0),
        perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
        seed in any::<u64>(),
    ) {
        let mut t = Tape::new();
        let attn = AttentionVars { w_q: t.constant(wq), w_k: t.constant(wk) };
        let m = mlp(&mut t, 4, seed);
        let hv = t.constant(h);
        let fv = t.constant(f);
        let fp = t.gather_rows(fv, &perm).unwrap();
        let (out, w) = jtg::temporal_attention(&mut t, hv, fv, &attn, &m, 1).unwrap();
        let (out_p, w_p) = jtg::temporal_attention(&mut t, hv, fp, &attn, &m, 1).unwrap();
        prop_assert!((t.value(w).sum() - 1.0).abs() < 1e-9);
        for (i, &src) in perm.iter().enumerate() {
            prop_assert!((t.value(w_p).data()[i] - t.value(w).data()[src]).abs() < 1e-12);
        }
        for (a, b) in t.value(out).data().iter().zip(t.value(out_p).data()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn modal_weights_conserve_mass_and_csl_ignores_va_av_swap(
        h in matrix(1, 4, 1.0),
        v in matrix(5, 4, 1.0),
        a in matrix(5, 4, 1.0),
        wq in matrix(4, 4, 2.0),
        wk in matrix(4, 4, 2.0),
    ) {
        let mut t = Tape::new();
        let attn = AttentionVars { w_q: t.constant(wq), w_k: t.constant(wk) };
        let m = mlp(&mut t, 4, 7);
        let (hv, vv, av) = (t.constant(h), t.constant(v), t.constant(a));
        let mut csl = Vec::new();
        for o in [InterleaveOrder::Va, InterleaveOrder::Av] {
            let f_av = jtg::interleave(&mut t, vv, av, o).unwrap();
            let (_, w) = jtg::temporal_attention(&mut t, hv, f_av, &attn, &m, 1).unwrap();
            let mw = jtg::extract_modal_weights(&mut t, w, o).unwrap();
            let mass = t.value(mw.w_a_raw).sum() + t.value(mw.w_v_raw).sum();
            prop_assert!((mass - 1.0).abs() < 1e-9);
            prop_assert!((t.value(mw.w_a).sum() - 1.0).abs() < 1e-9);
            let l = jtg::csl_loss(&mut t, mw.w_a, mw.w_v).unwrap();
            csl.push(t.value(l).item());
        }
        prop_assert!((csl[0] - csl[1]).abs() < 1e-12, "{:?}", csl);
        prop_assert!(csl[0] >= 0.0 && csl[0] <= std::f64::consts::LN_2);
    }

    #[test]
    fn spatial_maps_are_simplexes(probe in matrix(1, 5, 3.0), map in matrix(9, 5, 3.0), tau in 0.0f64..0.2) {
        let mut t = Tape::new();
        let (p, m) = (t.constant(probe), t.constant(map));
        let s = tsg::spatial_attention(&mut t, p, m).unwrap();
        prop_assert!((t.value(s).sum() - 1.0).abs() < 1e-9);
        let (g, keep) = tsg::threshold_mask(&mut t, s, tau).unwrap();
        for mode in [tsg::GroundingMode::Literal, tsg::GroundingMode::Renormalize] {
            let w = tsg::combined_weights(&mut t, s, Some((g, keep.as_slice())), mode).unwrap();
            prop_assert!((t.value(w).sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn generator_labels_are_consistent(seed in any::<u64>(), index in 0usize..500, noise in 0.0f64..0.5) {
        let cfg = TaskConfig { seed, noise_sigma: noise, ..TaskConfig::default() };
        let world = World::new(&cfg);
        let s = gen_scene(&cfg, &world, index).unwrap();
        prop_assert_eq!(s.answer, cfg.answer_for(s.gt_temporal.data()));
        prop_assert_eq!(s.answer, (cfg.answers - 1).min(s.active_segments()));
        let cells = cfg.cells();
        for t in 0..cfg.segments {
            let row = &s.gt_spatial.data()[t * cells..(t + 1) * cells];
            let on = row.iter().sum::<f64>();
            prop_assert_eq!(on, s.gt_temporal.data()[t]);
        }
        prop_assert_eq!(&gen_scene(&cfg, &world, index).unwrap(), &s);
    }

    #[test]
    fn noise_free_planted_cell_is_the_target_concept(seed in any::<u64>(), index in 0usize..200) {
        let cfg = TaskConfig { seed, noise_sigma: 0.0, ..TaskConfig::default() };
        let world = World::new(&cfg);
        let s = gen_scene(&cfg, &world, index).unwrap();
        for (t, cell) in s.gt_cells().into_iter().enumerate() {
            if let Some(c) = cell {
                let seg = s.visual_segment(t);
                prop_assert_eq!(world.nearest_concept(seg.row(c)), s.target_concept);
            }
        }
    }

    #[test]
    fn loss_terms_behave(l_qa in 0.0f64..5.0, l_csl in 0.0f64..0.7, l_s in 0.0f64..2.0, bump in 0.0f64..1.0, lambda in 0.0f64..2.0) {
        let w = LossWeights { lambda, csl_enabled: true };
        let base = w.combine(l_qa, l_csl, l_s);
        prop_assert!(w.combine(l_qa + bump, l_csl, l_s) >= base);
        prop_assert!(w.combine(l_qa, l_csl + bump, l_s) >= base);
        prop_assert!(w.combine(l_qa, l_csl, l_s + bump) >= base);
    }

    #[test]
    fn qa_loss_is_non_negative(p in simplex(4), y in 0usize..4) {
        let mut t = Tape::new();
        let pv = t.constant(p);
        let l = head::qa_loss(&mut t, pv, y).unwrap();
        prop_assert!(t.value(l).item() >= 0.0);
    }

    #[test]
    fn schedule_never_increases(e in 0usize..200) {
        let cfg = TrainConfig::default();
        prop_assert!(lr_schedule(e + 1, &cfg) <= lr_schedule(e, &cfg));
    }
}
