use std::collections::BTreeMap;
use std::sync::Arc;

use chrono::{Duration, TimeZone, Utc};
use mmds_core::agent::MedicalReport;
use mmds_core::evalharness::Accuracy;
use mmds_core::ingest::{build_kbs, QAPair, Taxonomy};
use mmds_core::ledger::{verify_lines, Ledger};
use mmds_core::retrieval::embed::ReferenceEmbedder;
use mmds_core::retrieval::{recall_pooled, recall_topk};
use mmds_core::videoparse::{self, EyeClosure, FacialFeatures, FrameObservation, Movement, Synkinesis};
use mmds_core::KnowledgeBaseSet;
use proptest::prelude::*;
use proptest::sample::select;

fn features() -> impl Strategy<Value = FacialFeatures> {
    (any::<bool>(), select(Movement::ALL.to_vec()), select(EyeClosure::ALL.to_vec()), select(Synkinesis::ALL.to_vec()), any::<bool>(), any::<bool>())
        .prop_map(|(symmetry_at_rest, movement, eye_closure, synkinesis, forehead_motion, tone_loss)| FacialFeatures {
            symmetry_at_rest,
            movement,
            eye_closure,
            synkinesis,
            forehead_motion,
            tone_loss,
        })
}

fn frame(i: usize, palsy_flag: bool) -> FrameObservation {
    FrameObservation { t: i as f64, palsy_flag, description: String::new(), features: FacialFeatures::normal(), at_rest: false }
}

fn report(i: usize, patient: &str, summary: &str) -> MedicalReport {
    MedicalReport {
        report_id: format!("R{i:06}"),
        session_id: format!("S{i:06}"),
        patient_id: patient.to_owned(),
        department: Some("neuro".into()),
        summary: summary.to_owned(),
        findings: "f".into(),
        recommendations: "r".into(),
        cited_cases: vec![],
        history_refs: vec![],
        created_at: Utc.with_ymd_and_hms(2026, 2, 1, 0, 0, 0).unwrap() + Duration::seconds(i as i64),
    }
}

const DEPTS: [&str; 4] = ["cardio", "neuro", "derm", "gastro"];
const WORDS: [&str; 12] = ["chest", "pain", "face", "droop", "rash", "itch", "stomach", "ache", "eye", "arm", "fever", "cough"];

fn labeled_pairs() -> impl Strategy<Value = Vec<QAPair>> {
    prop::collection::vec((0..DEPTS.len(), prop::collection::vec(select(WORDS.to_vec()), 1..6)), 1..60).prop_map(|rows| {
        rows.into_iter()
            .enumerate()
            .map(|(i, (d, words))| QAPair::new(format!("q{i:03}"), words.join(" "), "answer").in_department(DEPTS[d]))
            .collect()
    })
}

fn kbs(pairs: Vec<QAPair>) -> KnowledgeBaseSet {
    build_kbs(pairs, &Taxonomy::default(), Arc::new(ReferenceEmbedder::default())).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn gate_is_strict_majority(flags in prop::collection::vec(any::<bool>(), 1..64)) {
        let obs: Vec<_> = flags.iter().enumerate().map(|(i, f)| frame(i, *f)).collect();
        let count = flags.iter().filter(|f| **f).count();
        prop_assert_eq!(videoparse::palsy_gate(&obs).unwrap(), 2 * count > flags.len());
    }

    #[test]
    fn grading_is_total_and_monotone(f in features()) {
        let graded = videoparse::grade_hb(&f);
        prop_assert_eq!(graded.is_ok(), f.is_valid());
        if let Ok(g) = graded {
            prop_assert!(videoparse::rubric_clauses(&f).iter().any(|c| *c));
            for worse in f.one_step_worse().into_iter().filter(FacialFeatures::is_valid) {
                prop_assert!(videoparse::grade_hb(&worse).unwrap().grade >= g.grade);
            }
        }
    }

    #[test]
    fn percent_rounds_half_up(total in 1u64..5000, frac in 0.0f64..=1.0) {
        let correct = (total as f64 * frac).floor() as u64;
        let hundredths = (correct * 20_000 + total) / (2 * total);
        let want = format!("{}.{:02}", hundredths / 100, hundredths % 100);
        prop_assert_eq!(Accuracy::new(correct, total).percent(), Some(want));
    }

    #[test]
    fn ledger_round_trips_and_detects_payload_edits(
        summaries in prop::collection::vec("[a-zA-Z0-9 ,.]{0,40}", 1..12),
        pick in any::<prop::sample::Index>(),
        flip in 1u8..=255,
    ) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        let mut ledger = Ledger::open(&path).unwrap();
        for (i, s) in summaries.iter().enumerate() {
            let r = report(i, ["p1", "p2"][i % 2], s);
            ledger.append_report(r.clone(), r.created_at).unwrap();
        }
        let reopened = Ledger::open(&path).unwrap();
        prop_assert!(reopened.verify_chain());
        prop_assert_eq!(reopened.entries(), ledger.entries());

        let mut lines: Vec<Vec<u8>> = ledger.lines().iter().map(|l| l.as_bytes().to_vec()).collect();
        let target = pick.index(lines.len());
        let needle = b"\"summary\":\"";
        let line = &mut lines[target];
        let start = line.windows(needle.len()).position(|w| w == needle).unwrap();
        line[start + needle.len() - 1] ^= flip;
        prop_assert!(!verify_lines(&lines));
    }

    #[test]
    fn partition_matches_labels(pairs in labeled_pairs()) {
        let mut histogram: BTreeMap<String, usize> = Taxonomy::default().ids().into_iter().map(|d| (d, 0)).collect();
        for p in &pairs {
            *histogram.get_mut(p.department.as_deref().unwrap()).unwrap() += 1;
        }
        let kbs = kbs(pairs.clone());
        prop_assert_eq!(kbs.sizes(), histogram);
        prop_assert!(kbs.check_invariants().is_ok());
        for p in &pairs {
            prop_assert_eq!(kbs.department_of(&p.id), p.department.as_deref());
        }
    }

    #[test]
    fn relabeling_moves_a_pair(pairs in labeled_pairs(), pick in any::<prop::sample::Index>(), to in 0..DEPTS.len()) {
        let mut kbs = kbs(pairs.clone());
        let moved = pairs[pick.index(pairs.len())].clone().in_department(DEPTS[to]);
        kbs.upsert(moved.clone()).unwrap();
        prop_assert_eq!(kbs.total_documents(), pairs.len());
        prop_assert_eq!(kbs.department_of(&moved.id), Some(DEPTS[to]));
        prop_assert!(kbs.check_invariants().is_ok());
    }

    #[test]
    fn recall_is_sorted_and_pooled_dominates(pairs in labeled_pairs(), query in prop::collection::vec(select(WORDS.to_vec()), 1..5), k in 1usize..15) {
        let query = query.join(" ");
        let kbs = kbs(pairs);
        let q = kbs.embed(&query).unwrap();
        let pooled = recall_pooled(&q, &kbs, k);
        prop_assert_eq!(pooled.len(), k.min(kbs.total_documents()));
        prop_assert!(pooled.windows(2).all(|w| w[0].recall_score > w[1].recall_score
            || (w[0].recall_score == w[1].recall_score && w[0].pair_id < w[1].pair_id)));
        for (dept, kb) in kbs.iter() {
            let local = recall_topk(&query, kb, k, &kbs).unwrap();
            prop_assert!(local.iter().all(|c| kbs.department_of(&c.pair_id) == Some(dept)));
            if let (Some(top), Some(best)) = (local.first(), pooled.first()) {
                prop_assert!(best.recall_score >= top.recall_score);
            }
        }
    }
}
