use inkline::augment::{augment, AugmentConfig};
use inkline::convnets::{extract_patches, read_patches, ConvArchSpec, ConvNet, Family, PatchSpec};
use inkline::data::{
    cout_transform_with, decode_transcript, encode_transcript, Charset, GlyphSet, VClass,
};
use inkline::decode::{decode_with_lexicon, nearest_word_linear, Lexicon};
use inkline::evalkit::{cer, classification_metrics, levenshtein, roc_auc, ConfusionMatrix};
use inkline::imaging::{
    affine_warp, column_extrema, invert, quantize, resize, AffineMatrix, Extremum, GrayImage,
};
use inkline::normalize::{
    crop_resize, normalize_pipeline, normalize_zones, NormalizeConfig, ZoneLines,
};
use inkline::seq2seq::{CellKind, CharVocab, EncoderConfig, FeatureMode, ModelConfig, Seq2Seq};
use inkline::tensor::{Graph, Mode, ParamStore, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn image(max_w: usize, max_h: usize) -> impl Strategy<Value = GrayImage> {
    (1..=max_w, 1..=max_h).prop_flat_map(|(w, h)| {
        prop::collection::vec(0.0..=1.0f64, w * h)
            .prop_map(move |px| GrayImage::from_pixels(w, h, px).unwrap())
    })
}

/// Mostly-background image with a few dark blobs.
fn sparse_ink(max_w: usize, max_h: usize) -> impl Strategy<Value = GrayImage> {
    (4..=max_w, 4..=max_h, any::<u64>()).prop_map(|(w, h, seed)| {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::from_fn(w, h, |_, _| {
            if rng.random_bool(0.2) {
                rng.random_range(0.0..0.3)
            } else {
                1.0
            }
        })
    })
}

fn tiny_model(features: FeatureMode, seed: u64) -> Seq2Seq {
    let cfg = ModelConfig {
        image_height: 12,
        reader: Family::LeNet,
        reader_blocks: 2,
        features,
        encoder: EncoderConfig {
            cell: CellKind::Gru,
            size: 8,
            layers: 1,
            bidirectional: true,
            learned_initial_state: false,
        },
        attention_size: 8,
        dropout: 0.0,
    };
    let vocab = CharVocab::new("ab".chars()).unwrap();
    Seq2Seq::new(cfg, vocab, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invert_is_an_involution(img in image(12, 12)) {
        let back = invert(&invert(&img));
        // 1 − (1 − p) can round in the last place for small p
        prop_assert!(back.max_abs_diff(&img).unwrap() <= f64::EPSILON / 2.0);
        prop_assert_eq!(quantize(&back), quantize(&img));
    }

    #[test]
    fn identity_warp_preserves_pixels(img in image(12, 12)) {
        let out = affine_warp(&img, &AffineMatrix::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0), img.width(), img.height(), 1.0).unwrap();
        prop_assert!(out.max_abs_diff(&img).unwrap() <= 1e-6);
    }

    #[test]
    fn resize_keeps_constant_images(w in 1usize..20, h in 1usize..20, th in 1usize..30, tw in 1usize..30, v in 0.0..=1.0f64) {
        let out = resize(&GrayImage::filled(w, h, v), th, Some(tw)).unwrap();
        prop_assert!(out.pixels().iter().all(|&p| p == v));
    }

    #[test]
    fn bottom_extrema_lie_below_top(img in sparse_ink(16, 16)) {
        let top = column_extrema(&img, 0.5, Extremum::Top);
        let bottom = column_extrema(&img, 0.5, Extremum::Bottom);
        prop_assert_eq!(top.len(), bottom.len());
        for (t, b) in top.iter().zip(&bottom) {
            prop_assert_eq!(t.0, b.0);
            prop_assert!(b.1 >= t.1);
        }
    }

    #[test]
    fn crop_resize_hits_the_target(img in sparse_ink(60, 30), th in 4usize..40, tw in 4usize..80) {
        let cfg = NormalizeConfig { target_height: th, target_width: tw, ..NormalizeConfig::default() };
        let out = crop_resize(&img, &cfg);
        prop_assert_eq!((out.height(), out.width()), (th, tw));
    }

    #[test]
    fn zone_normalization_keeps_core_rows(img in sparse_ink(12, 30), u in 0usize..10, core in 1usize..10) {
        let h = img.height();
        prop_assume!(u + core < h);
        let zones = ZoneLines { upperline_y: u, baseline_y: u + core };
        let out = normalize_zones(&img, zones);
        // the ascender band shrinks to at most the core height; core rows follow unchanged
        let rescaled_asc = u.min(zones.core_height());
        for dy in 0..=core {
            for x in 0..img.width() {
                prop_assert_eq!(out.get(x, rescaled_asc + dy), img.get(x, u + dy));
            }
        }
    }

    #[test]
    fn augmentation_keeps_size_and_is_seeded(img in sparse_ink(20, 16), seed in any::<u64>()) {
        let cfg = AugmentConfig { seed, ..AugmentConfig::default() };
        let a = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let b = augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!((a.width(), a.height()), (img.width(), img.height()));
        prop_assert_eq!(a, b);
        let off = augment(&img, &AugmentConfig::disabled(), &mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(off, img);
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0..50.0f64, 1..20)) {
        let store = ParamStore::new();
        let mut g = Graph::new(&store, Mode::Eval);
        let x = g.input(Tensor::vector(v));
        let s = g.softmax(x);
        let p = g.value(s).data();
        prop_assert!(p.iter().all(|&q| q >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn backward_accumulates_additively(v in prop::collection::vec(-3.0..3.0f64, 1..10)) {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(v)).unwrap();
        let grads = {
            let mut g = Graph::new(&store, Mode::Train);
            let x = g.param(id);
            let t = g.tanh(x);
            let l = g.sum_squares(t);
            g.backward(l).unwrap()
        };
        store.zero_grad();
        store.accumulate(&grads);
        let once = store.get(id).grad.clone();
        store.accumulate(&grads);
        let twice = store.get(id).grad.data().to_vec();
        let doubled: Vec<f64> = once.data().iter().map(|g| 2.0 * g).collect();
        prop_assert_eq!(twice, doubled);
    }

    #[test]
    fn l2_penalty_and_gradient(v in prop::collection::vec(-3.0..3.0f64, 1..10)) {
        let lambda = 1e-4;
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(v.clone())).unwrap();
        let want: f64 = lambda * v.iter().map(|x| x * x).sum::<f64>();
        prop_assert!((store.l2_penalty(lambda) - want).abs() <= 1e-15 * (1.0 + want));
        store.zero_grad();
        store.add_l2_grad(lambda);
        for (g, x) in store.get(id).grad.data().iter().zip(&v) {
            prop_assert!((g - 2.0 * lambda * x).abs() <= 1e-18);
        }
    }

    #[test]
    fn levenshtein_is_a_metric(a in "[ab ]{0,8}", b in "[ab ]{0,8}", c in "[ab ]{0,8}") {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert_eq!(levenshtein(&a, &b) == 0, a == b);
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
    }

    #[test]
    fn cer_is_bounded(p in "[a-d]{0,10}", r in "[a-d]{1,10}") {
        let bound = p.chars().count().max(r.chars().count()) as f64 / r.chars().count() as f64;
        prop_assert!(cer(&p, &r).unwrap() <= bound);
    }

    #[test]
    fn confusion_sums(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60)) {
        let names = ["w", "x", "y", "z"];
        let truth: Vec<&str> = pairs.iter().map(|p| names[p.0]).collect();
        let pred: Vec<&str> = pairs.iter().map(|p| names[p.1]).collect();
        let cm = ConfusionMatrix::from_pairs(&truth, &pred).unwrap();
        for (i, cat) in cm.categories().iter().enumerate() {
            let cases = truth.iter().filter(|t| *t == cat).count() as u64;
            prop_assert_eq!(cm.row_sum(i), cases);
        }
        let rep = classification_metrics(&cm).unwrap();
        let correct = pairs.iter().filter(|p| p.0 == p.1).count() as f64;
        prop_assert!((rep.accuracy - correct / pairs.len() as f64).abs() < 1e-15);
    }

    #[test]
    fn auc_is_rank_invariant(
        data in prop::collection::vec((-5.0..5.0f64, any::<bool>()), 2..40),
    ) {
        let labels: Vec<bool> = data.iter().map(|d| d.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let scores: Vec<f64> = data.iter().map(|d| d.0).collect();
        let warped: Vec<f64> = scores.iter().map(|s| (0.7 * s).exp() + 3.0).collect();
        let (_, a) = roc_auc(&scores, &labels).unwrap();
        let (_, b) = roc_auc(&warped, &labels).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn lexicon_decoding_is_optimal(
        words in prop::collection::btree_set("[a-c]{1,5}", 1..30),
        preds in prop::collection::vec("[a-d]{0,6}", 1..10),
    ) {
        let lex = Lexicon::new(&words);
        let out = decode_with_lexicon(&preds, &lex).unwrap();
        for (p, (w, d)) in preds.iter().zip(&out) {
            prop_assert_eq!(*d == 0, words.contains(p));
            prop_assert_eq!(levenshtein(p, w), *d);
            let min = words.iter().map(|x| levenshtein(p, x)).min().unwrap();
            prop_assert_eq!(*d, min);
            prop_assert_eq!(&nearest_word_linear(p, &lex).unwrap(), &(w.clone(), *d));
        }
    }

    #[test]
    fn transcripts_round_trip(s in "[a-f]{0,12}") {
        let charset = Charset::from_texts(["abcdef"]);
        let tokens = encode_transcript(&s, &charset).unwrap();
        prop_assert_eq!(decode_transcript(&tokens, &charset), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn cout_keeps_most_ink(seed in any::<u64>(), which in 0usize..40) {
        let glyphs = GlyphSet::builtin(1, seed % 7);
        let chars: Vec<char> = glyphs.chars().collect();
        let c = chars[which % chars.len()];
        let img = &glyphs.exemplars(c)[0];
        let out = cout_transform_with(img, VClass::of(c), &[], &mut ChaCha8Rng::seed_from_u64(seed));
        let ratio = out.character.ink_mass() / img.ink_mass();
        prop_assert!((0.4..=1.0).contains(&ratio), "ratio {}", ratio);
    }

    #[test]
    fn pipeline_is_deterministic(img in sparse_ink(50, 24), seed in any::<u64>()) {
        let cfg = NormalizeConfig { target_height: 24, target_width: 64, seed, ..NormalizeConfig::default() };
        prop_assert_eq!(normalize_pipeline(&img, &cfg).unwrap(), normalize_pipeline(&img, &cfg).unwrap());
    }

    #[test]
    fn patch_reader_is_translation_consistent(seed in any::<u64>(), w in 24usize..40) {
        use rand::Rng;
        let step = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = GrayImage::from_fn(w, 12, |_, _| rng.random_range(0.0..1.0));
        let shifted = img.crop(step as isize, 0, w - step, 12, 0.0);
        let mut store = ParamStore::new();
        let net = ConvNet::build(&ConvArchSpec::lenet_reader(12, 8), &mut store, "r", &mut rng).unwrap();
        let spec = PatchSpec::new(8, step).unwrap();
        let mut g = Graph::new(&store, Mode::Eval);
        let a = read_patches(&net, &mut g, &extract_patches(&img, spec).unwrap()).unwrap();
        let b = read_patches(&net, &mut g, &extract_patches(&shifted, spec).unwrap()).unwrap();
        let (ta, tb) = (g.value(a), g.value(b));
        let f = ta.shape()[1];
        let n = tb.shape()[0];
        prop_assert_eq!(ta.shape()[0], n + 1);
        prop_assert_eq!(&ta.data()[f..], tb.data());
    }

    #[test]
    fn teacher_forcing_matches_free_running_on_own_output(seed in any::<u64>()) {
        use rand::Rng;
        let model = tiny_model(FeatureMode::Patches { width: 6, step: 3 }, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let img = GrayImage::from_fn(20, 12, |_, _| rng.random_range(0.0..1.0));
        let decoded = model.greedy_decode(&img, 5).unwrap();
        prop_assume!(!decoded.tokens.contains(&inkline::seq2seq::GO));
        // feed the model's own argmax choices as the teacher-forced target
        let mut target = decoded.tokens.clone();
        if target.last() != Some(&inkline::seq2seq::END) {
            target.push(inkline::seq2seq::END);
        }
        let n = decoded.tokens.len();
        let mut g = Graph::new(model.store(), Mode::Eval);
        let tf = model.forward_train(&mut g, &img, &target, true).unwrap();
        let fr = model.forward_train(&mut g, &img, &target, false).unwrap();
        let (a, b) = (g.value(tf.logits).data().to_vec(), g.value(fr.logits).data().to_vec());
        let v = model.vocab().len();
        prop_assert_eq!(&a[..n * v], &b[..n * v]);
        prop_assert_eq!(tf.decoder_initial, tf.encoder_state);
    }
}

#[test]
fn distinct_seeds_give_distinct_augmentations() {
    let img = GrayImage::from_fn(
        30,
        20,
        |x, y| if (x / 4 + y / 5) % 2 == 0 { 0.1 } else { 1.0 },
    );
    let cfg = AugmentConfig {
        translate: inkline::augment::TranslateParams { p: 1.0, max: 3.0 },
        ..AugmentConfig::default()
    };
    let outs: Vec<GrayImage> = (0..6)
        .map(|s| augment(&img, &cfg, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect();
    let distinct = outs
        .iter()
        .enumerate()
        .filter(|(i, o)| outs[..*i].iter().all(|p| p != *o))
        .count();
    assert!(distinct >= 5, "only {distinct} distinct outputs");
}
