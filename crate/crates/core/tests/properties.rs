use proptest::prelude::*;
use sqlf::clf::{train_gbt, GbtConfig, GbtModel};
use sqlf::gan::{GanConfig, GanModel};
use sqlf::io::ingest::{ingest_reader, write_queries};
use sqlf::io::{Checkpoint, CsvSchema, LabeledQuery};
use sqlf::lab::{mix, stratified_kfold, Dataset, MixSpec, Provenance};
use sqlf::metrics::{bleu, cosine_similarity, levenshtein};
use sqlf::tensor::Tensor;
use sqlf::text::{tokenize, TokenizeOptions, SEQ_LEN};
use sqlf::unet::{UNetArch, UNetParams};
use sqlf::vae::{VaeArch, VaeParams};

/// Replaces every tensor value with fresh noise so round-trips see
/// arbitrary bit patterns, not just initialiser output.
fn scramble(c: &Checkpoint, seed: u64) -> Checkpoint {
    let mut r = sqlf::rng::seeded(seed);
    let mut out = Checkpoint::new(c.kind.clone()).with_meta(c.meta.clone());
    for (name, t) in &c.tensors {
        out.push(name.clone(), Tensor::randn(t.shape(), 3.0, &mut r));
    }
    out
}

fn assert_bit_exact(bytes: &[u8]) {
    let back = Checkpoint::from_bytes(bytes).unwrap();
    assert_eq!(back.to_bytes(), bytes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn raw_checkpoints_round_trip(seed in any::<u64>(), bits in prop::collection::vec(any::<u64>(), 1..40)) {
        let mut c = Checkpoint::new("raw");
        let n = bits.len();
        c.push("w", Tensor::vector(bits.iter().map(|&b| f64::from_bits(b)).collect()));
        c.push("noise", Tensor::randn(&[2, n], 1.0, &mut sqlf::rng::seeded(seed)));
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let got: Vec<u64> = back.require("w").unwrap().data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(got, bits);
        prop_assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn model_checkpoints_round_trip(seed in any::<u64>()) {
        let vae = VaeParams::init(VaeArch { input: 12, hidden1: 8, hidden2: 6, latent: 4 }, seed);
        let c = scramble(&vae.to_checkpoint(), seed);
        let restored = VaeParams::from_checkpoint(&c).unwrap();
        assert_bit_exact(&restored.to_checkpoint().to_bytes());
        prop_assert_eq!(restored.to_checkpoint().to_bytes(), c.to_bytes());

        let unet = UNetParams::init(UNetArch::new(3, 8, 3, 2).unwrap(), 0.1, seed);
        let c = scramble(&unet.to_checkpoint(), seed ^ 1);
        prop_assert_eq!(UNetParams::from_checkpoint(&c).unwrap().to_checkpoint().to_bytes(), c.to_bytes());

        let gan = GanModel::init(&GanConfig { data_dim: 4, z_dim: 3, gen_hidden: vec![5], critic_hidden: vec![5], seed, ..GanConfig::default() });
        let c = scramble(&gan.to_checkpoint(), seed ^ 2);
        prop_assert_eq!(GanModel::from_checkpoint(&c).unwrap().to_checkpoint().to_bytes(), c.to_bytes());
    }

    #[test]
    fn gbt_checkpoint_round_trip(seed in any::<u64>()) {
        let x = Tensor::randn(&[30, 3], 1.0, &mut sqlf::rng::seeded(seed));
        let y: Vec<u8> = (0..30).map(|i| u8::from(x.row(i)[0] + 0.3 * x.row(i)[1] > 0.0 || i == 0) * u8::from(i != 1)).collect();
        let m = train_gbt(&x, &y, &GbtConfig { n_estimators: 4, seed, ..GbtConfig::default() }).unwrap();
        let bytes = m.to_checkpoint().to_bytes();
        let back = GbtModel::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_ingest_is_injective(rows in prop::collection::vec(("[ -~\n\"',]{1,30}", 0u8..2), 0..20)) {
        let queries: Vec<LabeledQuery> = rows
            .into_iter()
            .filter(|(q, _)| !q.trim().is_empty())
            .map(|(query, label)| LabeledQuery { query, label })
            .collect();
        let schema = CsvSchema::default();
        let mut buf = Vec::new();
        write_queries(&mut buf, &queries, &schema).unwrap();
        let report = ingest_reader(buf.as_slice(), &schema).unwrap();
        prop_assert!(report.skipped.is_empty());
        prop_assert_eq!(report.queries, queries);
    }

    #[test]
    fn tokenize_always_yields_fixed_length(raw in "\\PC{0,300}", decode in any::<bool>()) {
        let opts = TokenizeOptions { url_decode: decode };
        let a = tokenize(&raw, opts).unwrap();
        prop_assert_eq!(a.tokens().len(), SEQ_LEN);
        prop_assert!(a.content().len() <= SEQ_LEN);
        prop_assert_eq!(a, tokenize(&raw, opts).unwrap());
    }

    #[test]
    fn folds_partition_and_stratify(y in prop::collection::vec(0u8..2, 12..80), k in 2usize..5, seed in any::<u64>()) {
        let ones = y.iter().filter(|&&v| v == 1).count();
        prop_assume!(ones >= k && y.len() - ones >= k);
        let plan = stratified_kfold(&y, k, seed).unwrap();
        let mut all: Vec<usize> = plan.folds.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..y.len()).collect::<Vec<_>>());
        for class in [0usize, 1] {
            let counts: Vec<usize> = plan.class_counts.iter().map(|c| if class == 0 { c.0 } else { c.1 }).collect();
            prop_assert!(counts.iter().max().unwrap() - counts.iter().min().unwrap() <= 1);
        }
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn mix_keeps_real_rows_and_floors_fractions(p1 in 0.0f64..=1.0, p2 in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut r = sqlf::rng::seeded(seed);
        let ds = |n: usize, prov, r: &mut sqlf::rng::SeededRng| {
            Dataset::new(Tensor::randn(&[n, 2], 1.0, r), (0..n).map(|i| (i % 2) as u8).collect(), prov).unwrap()
        };
        let (real, unet, cwgan) = (ds(10, Provenance::Real, &mut r), ds(7, Provenance::Unet, &mut r), ds(9, Provenance::Cwgan, &mut r));
        let m = mix(&real, &unet, &cwgan, &MixSpec { p1, p2, seed }).unwrap();
        let count = |p| m.provenance.iter().filter(|&&v| v == p).count();
        prop_assert_eq!(count(Provenance::Real), 10);
        prop_assert_eq!(count(Provenance::Unet), (p1 * 7.0).floor() as usize);
        prop_assert_eq!(count(Provenance::Cwgan), (p2 * 9.0).floor() as usize);
    }

    #[test]
    fn metric_bounds(a in prop::collection::vec(0u8..4, 1..12), b in prop::collection::vec(0u8..4, 1..12), c in prop::collection::vec(0u8..4, 0..12)) {
        prop_assert_eq!(levenshtein(&a, &b), levenshtein(&b, &a));
        prop_assert!(levenshtein(&a, &c) <= levenshtein(&a, &b) + levenshtein(&b, &c));
        let s = bleu(&a, &b, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        let (fa, fb): (Vec<f64>, Vec<f64>) = a.iter().zip(&b).map(|(&x, &y)| (f64::from(x) - 1.5, f64::from(y) - 1.5)).unzip();
        if let Some(cs) = cosine_similarity(&fa, &fb) {
            prop_assert!((-1.0..=1.0).contains(&cs));
        }
    }
}
