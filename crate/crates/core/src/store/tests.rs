use super::*;
use crate::gating::BBox;
use crate::ingest::{job_id, JobSource};
use chrono::{Duration, TimeZone};

fn labels() -> Vec<String> {
    ["great_tit", "blue_tit", "european_robin"].iter().map(|s| s.to_string()).collect()
}

fn policy() -> StorePolicy {
    StorePolicy {
        labels: labels(),
        cls_threshold: 0.7,
    }
}

fn t0() -> DateTime<Utc> {
    Utc.with_ymd_and_hms(2026, 5, 2, 9, 0, 0).unwrap()
}

fn sighting(id: &str, species: usize, conf: f64, by: DecidedBy, at: DateTime<Utc>) -> Sighting {
    Sighting {
        id: id.into(),
        clip_id: "clip".into(),
        camera_id: "cam1".into(),
        frame_index: 0,
        bbox: BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
        species_index: species,
        species_label: labels()[species].clone(),
        confidence: conf,
        decided_by: by,
        created_at: at,
        crop_ref: format!("{id}-crop"),
        supersedes: None,
    }
}

fn review(id: &str, at: DateTime<Utc>) -> ReviewItem {
    ReviewItem {
        id: id.into(),
        crop_ref: format!("{id}-crop"),
        clip_id: "clip".into(),
        camera_id: "cam1".into(),
        frame_index: 3,
        bbox: BBox::new(1.0, 2.0, 30.0, 40.0).unwrap(),
        topk: vec![
            RankedLabel { species_index: 1, species_label: "blue_tit".into(), prob: 0.6 },
            RankedLabel { species_index: 0, species_label: "great_tit".into(), prob: 0.3 },
        ],
        status: ReviewStatus::Pending,
        assigned_label: None,
        reviewed_at: None,
        created_at: at,
    }
}

fn result_with(clip: &str, sightings: Vec<Sighting>, reviews: Vec<ReviewItem>) -> ClipResult {
    ClipResult {
        clip_id: clip.into(),
        frames_sampled: 10,
        frames_blurred: 0,
        detections_raw: sightings.len() + reviews.len(),
        detections_kept: sightings.len() + reviews.len(),
        sightings,
        review_items: reviews,
        species_summary: vec![],
    }
}

fn tiny_png() -> Vec<u8> {
    crate::media::FrameImage::filled(2, 2, [1, 2, 3]).unwrap().to_png()
}

fn job(hash: &str, at: DateTime<Utc>) -> ClipJob {
    ClipJob {
        id: job_id(hash, at),
        source: JobSource::Cli,
        path: "/tmp/x".into(),
        size_bytes: 10,
        received_at: at,
        camera_id: "cam1".into(),
        status: JobStatus::Pending,
        content_hash: hash.into(),
        attempts: 0,
        reason: None,
    }
}

#[test]
fn read_your_writes_and_guards() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), policy()).unwrap();
    assert!(store.list_sightings(&SightingFilter::default(), 10, None).unwrap().items.is_empty());

    store.record_sighting(sighting("a", 0, 0.9, DecidedBy::Auto, t0())).unwrap();
    let page = store.list_sightings(&SightingFilter::default(), 10, None).unwrap();
    assert_eq!(page.items.len(), 1);

    let low = store.record_sighting(sighting("b", 0, 0.5, DecidedBy::Auto, t0()));
    assert!(matches!(low, Err(StoreError::Validation(_))));
    let boundary = store.record_sighting(sighting("b", 0, 0.7, DecidedBy::Auto, t0()));
    assert!(matches!(boundary, Err(StoreError::Validation(_))));

    store.record_sighting(sighting("c", 1, 0.5, DecidedBy::Human, t0())).unwrap();
    let all = store.all_sightings();
    assert_eq!(all[1].decided_by, DecidedBy::Human);

    let dup = store.record_sighting(sighting("c", 1, 0.5, DecidedBy::Human, t0()));
    assert!(matches!(dup, Err(StoreError::Conflict(_))));
    let mut bad = sighting("d", 2, 0.9, DecidedBy::Auto, t0());
    bad.species_label = "great_tit".into();
    assert!(store.record_sighting(bad).is_err());
}

#[test]
fn pagination_has_no_overlap() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), policy()).unwrap();
    for (i, id) in ["x", "y", "z"].iter().enumerate() {
        store
            .record_sighting(sighting(id, 0, 0.9, DecidedBy::Auto, t0() + Duration::seconds(i as i64)))
            .unwrap();
    }
    let f = SightingFilter::default();
    let p1 = store.list_sightings(&f, 2, None).unwrap();
    assert_eq!(p1.items.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["x", "y"]);
    let p2 = store.list_sightings(&f, 2, p1.next_cursor.as_deref()).unwrap();
    assert_eq!(p2.items.iter().map(|s| s.id.as_str()).collect::<Vec<_>>(), ["z"]);
    assert!(p2.next_cursor.is_none());

    assert!(matches!(store.list_sightings(&f, 2, Some("!!!")), Err(StoreError::BadCursor)));
    assert!(matches!(
        store.list_sightings(&f, 2, Some(&URL_SAFE_NO_PAD.encode("nope"))),
        Err(StoreError::BadCursor)
    ));

    let excluded = SightingFilter {
        from: Some(t0() - Duration::days(3)),
        to: Some(t0() - Duration::days(2)),
        ..Default::default()
    };
    assert!(store.list_sightings(&excluded, 2, None).unwrap().items.is_empty());
    let by_species = SightingFilter { species: Some("blue_tit".into()), ..Default::default() };
    assert!(store.list_sightings(&by_species, 5, None).unwrap().items.is_empty());
    let by_camera = SightingFilter { camera: Some("cam1".into()), ..Default::default() };
    assert_eq!(store.list_sightings(&by_camera, 5, None).unwrap().items.len(), 3);
}

#[test]
fn review_flow() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), policy()).unwrap();
    let res = result_with("clip", vec![], vec![review("r1", t0()), review("r2", t0()), review("r3", t0())]);
    let crops: Vec<(String, Vec<u8>)> = ["r1", "r2", "r3"]
        .iter()
        .map(|r| (format!("{r}-crop"), tiny_png()))
        .collect();
    store.commit_clip(&res, &crops).unwrap();
    assert_eq!(store.pending_reviews(10, None).unwrap().items.len(), 3);

    let (item, s) = store.submit_review("r1", ReviewAction::Label { species_index: 1 }).unwrap();
    assert_eq!(item.status, ReviewStatus::Labeled);
    assert_eq!(item.assigned_label, Some(1));
    let s = s.unwrap();
    assert_eq!((s.species_index, s.confidence, s.decided_by), (1, 0.6, DecidedBy::Human));

    let (_, s) = store.submit_review("r2", ReviewAction::Label { species_index: 2 }).unwrap();
    assert_eq!(s.unwrap().confidence, 0.0);

    let (item, s) = store.submit_review("r3", ReviewAction::Reject).unwrap();
    assert_eq!(item.status, ReviewStatus::Rejected);
    assert!(s.is_none());

    assert!(matches!(store.submit_review("r1", ReviewAction::Reject), Err(StoreError::Conflict(_))));
    assert!(matches!(store.submit_review("nope", ReviewAction::Reject), Err(StoreError::NotFound(_))));
    assert_eq!(store.all_sightings().len(), 2);
    assert!(store.pending_reviews(10, None).unwrap().items.is_empty());

    let out = dir.path().join("export");
    let entries = store.export_reviews(&out).unwrap();
    assert_eq!(entries.len(), 2);
    let manifest = std::fs::read_to_string(out.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    for e in &entries {
        assert!(out.join(&e.crop_file).is_file());
        assert_eq!(store.review(&e.review_id).unwrap().assigned_label, Some(e.species_index));
    }
    assert!(entries.iter().all(|e| e.review_id != "r3"));
}

#[test]
fn bad_species_index_on_review() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), policy()).unwrap();
    store.commit_clip(&result_with("c", vec![], vec![review("r", t0())]), &[]).unwrap();
    let err = store.submit_review("r", ReviewAction::Label { species_index: 9 });
    assert!(matches!(err, Err(StoreError::Validation(_))));
    assert_eq!(store.review("r").unwrap().status, ReviewStatus::Pending);
}

#[test]
fn empty_export_writes_empty_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), policy()).unwrap();
    let out = dir.path().join("ex");
    assert!(store.export_reviews(&out).unwrap().is_empty());
    assert_eq!(std::fs::read_to_string(out.join("manifest.jsonl")).unwrap(), "");
}

#[test]
fn reopen_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let (sightings, reviews, jobs, result) = {
        let store = Store::open(dir.path(), policy()).unwrap();
        store.insert_job(job("aa11", t0())).unwrap();
        store
            .record_sighting(sighting("s", 2, 0.1 + 0.2 + 0.5, DecidedBy::Auto, t0() + Duration::nanoseconds(123)))
            .unwrap();
        let r = result_with(
            "clip",
            vec![sighting("p", 0, 0.931_234_567_890_123_4, DecidedBy::Auto, t0())],
            vec![review("r1", t0()), review("r2", t0())],
        );
        store.commit_clip(&r, &[("r1-crop".into(), tiny_png())]).unwrap();
        store.submit_review("r1", ReviewAction::Label { species_index: 0 }).unwrap();
        (store.all_sightings(), store.reviews(), store.jobs(), store.clip_result("clip"))
    };
    let store = Store::open(dir.path(), policy()).unwrap();
    assert_eq!(store.all_sightings(), sightings);
    assert_eq!(store.reviews(), reviews);
    assert_eq!(store.jobs(), jobs);
    assert_eq!(store.clip_result("clip"), result);
}

#[test]
fn second_open_is_locked() {
    let dir = tempfile::tempdir().unwrap();
    let _a = Store::open(dir.path(), policy()).unwrap();
    assert!(matches!(Store::open(dir.path(), policy()), Err(StoreError::Locked(_))));
}

#[test]
fn torn_tail_is_dropped_but_middle_corruption_fails() {
    let dir = tempfile::tempdir().unwrap();
    {
        let store = Store::open(dir.path(), policy()).unwrap();
        store.record_sighting(sighting("a", 0, 0.9, DecidedBy::Auto, t0())).unwrap();
    }
    let path = dir.path().join(SIGHTINGS);
    let mut f = OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(b"{\"id\":\"half").unwrap();
    drop(f);
    {
        let store = Store::open(dir.path(), policy()).unwrap();
        assert_eq!(store.all_sightings().len(), 1);
        store.record_sighting(sighting("b", 0, 0.9, DecidedBy::Auto, t0())).unwrap();
    }
    let store = Store::open(dir.path(), policy()).unwrap();
    assert_eq!(store.all_sightings().len(), 2);
    drop(store);

    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, format!("garbage\n{text}")).unwrap();
    match Store::open(dir.path(), policy()) {
        Err(StoreError::Corrupt { line, .. }) => assert_eq!(line, 1),
        other => panic!("expected corruption, got {other:?}"),
    }
}

#[test]
fn commit_replaces_previous_results() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), policy()).unwrap();
    let first = result_with("clip", vec![sighting("p1", 0, 0.9, DecidedBy::Auto, t0())], vec![]);
    store.commit_clip(&first, &[]).unwrap();
    store.commit_clip(&first, &[]).unwrap();
    assert_eq!(store.all_sightings().len(), 1);
    let bad = result_with("clip", vec![sighting("p1", 0, 0.6, DecidedBy::Auto, t0())], vec![]);
    assert!(store.commit_clip(&bad, &[]).is_err());
    drop(store);
    let store = Store::open(dir.path(), policy()).unwrap();
    assert_eq!(store.all_sightings().len(), 1);
}

#[test]
fn job_dedupe_and_transitions() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), policy()).unwrap();
    let (a, fresh) = store.insert_job(job("hash1", t0())).unwrap();
    assert!(fresh);
    let (b, fresh) = store.insert_job(job("hash1", t0() + Duration::seconds(5))).unwrap();
    assert!(!fresh);
    assert_eq!(a.id, b.id);
    assert_eq!(store.queue_depth(), 1);

    assert!(matches!(
        store.set_job_status(&a.id, JobStatus::Done, None),
        Err(StoreError::InvalidTransition { .. })
    ));
    let j = store.set_job_status(&a.id, JobStatus::Processing, None).unwrap();
    assert_eq!(j.attempts, 1);
    drop(store);
    let store = Store::open(dir.path(), policy()).unwrap();
    let pending = store.requeue_interrupted().unwrap();
    assert_eq!(pending.len(), 1);
    assert_eq!(pending[0].status, JobStatus::Pending);
}

#[test]
fn daily_summary_counts_per_day_and_species() {
    let dir = tempfile::tempdir().unwrap();
    let store = Store::open(dir.path(), policy()).unwrap();
    for (i, (sp, day)) in [(0, 0), (0, 0), (1, 0), (0, 1)].iter().enumerate() {
        store
            .record_sighting(sighting(&format!("s{i}"), *sp, 0.9, DecidedBy::Auto, t0() + Duration::days(*day)))
            .unwrap();
    }
    let s = store.daily_summary(None, None).unwrap();
    let flat: Vec<(String, &str, usize)> =
        s.iter().map(|d| (d.date.to_string(), d.species_label.as_str(), d.count)).collect();
    assert_eq!(
        flat,
        vec![
            ("2026-05-02".into(), "blue_tit", 1),
            ("2026-05-02".into(), "great_tit", 2),
            ("2026-05-03".into(), "great_tit", 1)
        ]
    );
    assert!(store.daily_summary(Some(t0() + Duration::days(5)), None).unwrap().is_empty());
}
