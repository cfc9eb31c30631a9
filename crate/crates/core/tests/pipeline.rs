// SPDX-License-Identifier: Apache-2.0

use pct_core::chunking::{encode_points, normalize_keys, ChunkedDictionary, ContactRules};
use pct_core::datagen::{self, GeneratorConfig};
use pct_core::enclave_sim::{run_end_to_end, EnclaveBudget, TrustedRegion};
use pct_core::encoding::{EncodingParams, MixMode};
use pct_core::oracle::{evaluate, ExactThresholds};
use pct_core::psi::{self, client_id_from_u64, Mode, PsiConfig, Query, QueryBatch};

const T0: i64 = 1_601_856_000;

#[test]
fn generated_data_survives_csv_disk_and_enclave() {
    let dir = tempfile::tempdir().unwrap();
    let base = GeneratorConfig {
        duration_s: 4 * 3600,
        seed: 5,
        ..GeneratorConfig::default()
    };
    let server = datagen::generate(&GeneratorConfig {
        n_users: 10,
        ..base.clone()
    })
    .unwrap();
    let clients = datagen::generate(&GeneratorConfig {
        n_users: 30,
        first_user_id: 100,
        ..base
    })
    .unwrap();

    let csv = dir.path().join("server.csv");
    datagen::write_csv(&server, &csv).unwrap();
    let server_back = datagen::read_csv(&csv).unwrap();
    assert_eq!(server_back.len(), server.len());
    for (a, b) in server.iter().zip(&server_back) {
        assert_eq!(a.user_id, b.user_id);
        assert_eq!(a.points.len(), b.points.len());
    }

    let params = EncodingParams::new(23, 22, T0, T0 + 14 * 86_400, MixMode::Sequential).unwrap();
    let keys = normalize_keys(encode_points(&datagen::flatten(&server_back), &params).unwrap());
    let dict = ChunkedDictionary::from_sorted_keys(params, keys, 4).unwrap();
    let rules = ContactRules {
        theta_doe_s: 300,
        sampling_interval_s: 60,
    };
    let manifest = dict.save(&dir.path().join("dict"), &rules).unwrap();
    let (loaded, m) = ChunkedDictionary::load(&manifest).unwrap();
    assert_eq!(loaded, dict);
    assert_eq!(m.rules, rules);

    let queries: Vec<Query> = clients
        .iter()
        .map(|u| Query {
            client_id: client_id_from_u64(u.user_id),
            values: encode_points(&u.points, &params).unwrap(),
        })
        .collect();
    let batch = QueryBatch::new(queries.clone(), &params);
    let mut region = TrustedRegion::with_seed(1, EnclaveBudget::default());
    let sealed = region.seal_dictionary(&loaded).unwrap();
    let cfg = PsiConfig {
        theta_doe_s: m.rules.theta_doe_s,
        ..PsiConfig::default()
    };
    for mode in Mode::ALL {
        let plain: Vec<Option<bool>> = psi::run(&batch, &loaded, mode, cfg)
            .unwrap()
            .0
            .iter()
            .map(|r| Some(r.positive))
            .collect();
        let report = run_end_to_end(&mut region, &sealed, &queries, mode, cfg, 7, T0).unwrap();
        let enc: Vec<Option<bool>> = report.results.iter().map(|(_, r)| *r).collect();
        assert_eq!(enc, plain, "mode {mode}");
        assert_eq!(report.batches, 5);
        assert_eq!(report.max_batch_ecalls, 5);
    }
    assert_eq!(region.session_count(), 0);
}

#[test]
fn stpsi_never_misses_a_shared_cell() {
    let base = GeneratorConfig {
        duration_s: 3 * 3600,
        seed: 9,
        ..GeneratorConfig::default()
    };
    let server = datagen::generate(&GeneratorConfig {
        n_users: 6,
        ..base.clone()
    })
    .unwrap();
    let clients = datagen::generate(&GeneratorConfig {
        n_users: 40,
        first_user_id: 50,
        ..base
    })
    .unwrap();
    let params = EncodingParams::new(22, 22, T0, T0 + 14 * 86_400, MixMode::Interleave).unwrap();
    let th = ExactThresholds::cell_sized(&params);
    let server_points = datagen::flatten(&server);
    let st = evaluate(&clients, &server_points, &params, &th, Mode::StPsi).unwrap();
    let nfp = evaluate(&clients, &server_points, &params, &th, Mode::NfpStPsi).unwrap();
    // nfp flags a superset of stpsi
    for (a, b) in st.predicted.iter().zip(&nfp.predicted) {
        assert!(!a || *b);
    }
    assert_eq!(nfp.matrix.fn_, 0);
    assert_eq!(st.matrix.total(), clients.len() as u64);
}
