//! Small on-disk fixtures shared by the integration tests.

#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use edge::cli::{CalibrationDataFile, CalibrationExample};
use edge::edgescore::ScoreComponents;
use edge::generate::{AttributeVector, GenerationConstraints, MisconceptionRule, RuleTemplate};
use edge::io::{
    save_json, save_state, ItemBankFile, LearnerStateFile, LoggedResponse, ResponseLogFile,
    FORMAT_VERSION,
};
use edge::model::{
    laplace_update, Distractor, Item, LearnerState, Observation, ResponseModelParams, TopicBelief,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Fixtures {
    pub dir: PathBuf,
    pub bank: PathBuf,
    pub tight_bank: PathBuf,
    pub state: PathBuf,
    pub log: PathBuf,
    pub calibration: PathBuf,
}

fn bank() -> ItemBankFile {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut items = Vec::new();
    for t in 0..2usize {
        for i in 0..14 {
            let x0 = 1.0 + 0.5 * (i % 12) as f64;
            let x1 = if i % 2 == 0 { 0.1 } else { -0.15 };
            let b = 0.3 * x0 - 1.5 + rng.random_range(-0.05..0.05);
            let a = 1.1 + 0.2 * x1 + rng.random_range(-0.05..0.05);
            let concepts = if i == 13 { vec![0, 1] } else { vec![t] };
            let mut it = Item::new(format!("t{t}q{i:02}"), a, b, concepts);
            it.stem_embedding = vec![t as f64, 0.1 * i as f64];
            it.distractors = (0..3)
                .map(|k| Distractor {
                    embedding: vec![if k == 0 { 1.0 } else { 0.0 }, k as f64 * 0.5],
                    text: None,
                })
                .collect();
            it.attributes = Some(AttributeVector::new(vec![x0, x1], vec![]));
            it.rules = vec!["sign-flip".into()];
            items.push(it);
        }
    }
    let mut bank = ItemBankFile::new(vec!["negatives".into(), "fractions".into()], items);
    bank.rules = vec![MisconceptionRule::new(
        0,
        "sign-flip",
        RuleTemplate::SignFlip {
            coeffs: vec![1.0, 1.0],
            flipped: 1,
            code_effects: vec![],
        },
    )];
    bank.constraints = Some(GenerationConstraints {
        bounds: vec![[1.0, 9.0], [-1.0, 1.0]],
        steps: vec![0.5, 0.05],
        eps_a: 0.3,
        eps_b: 0.5,
        delta: 1.0,
        ..Default::default()
    });
    bank
}

fn log(bank: &ItemBankFile) -> ResponseLogFile {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut responses = Vec::new();
    for l in 0..12 {
        let holder = l < 5;
        for r in 0..16 {
            let item = &bank.items[rng.random_range(0..bank.items.len())];
            let obs = if rng.random_bool(0.55) {
                Observation::correct(rng.random_range(10.0..50.0), rng.random_range(0.5..1.0))
            } else if holder {
                Observation::wrong(0, rng.random_range(3.0..8.0), rng.random_range(0.7..1.0))
            } else {
                Observation::wrong(
                    rng.random_range(1..3),
                    rng.random_range(20.0..60.0),
                    rng.random_range(0.0..0.4),
                )
            };
            responses.push(LoggedResponse {
                learner: format!("learner-{l:02}"),
                item_id: item.id.clone(),
                obs,
                time: r as f64,
            });
        }
    }
    ResponseLogFile {
        version: FORMAT_VERSION,
        responses,
    }
}

fn state(bank: &ItemBankFile) -> LearnerState {
    let params = ResponseModelParams::default();
    let mut s = LearnerState::uniform(2, TopicBelief::default());
    s.misconception_posterior = vec![0.2, 0.8];
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for step in 0..10 {
        let item = &bank.items[rng.random_range(0..bank.items.len())];
        let obs = if rng.random_bool(0.6) {
            Observation::correct(rng.random_range(10.0..40.0), rng.random_range(0.4..1.0))
        } else {
            Observation::wrong(
                rng.random_range(0..3),
                rng.random_range(5.0..40.0),
                rng.random_range(0.0..0.8),
            )
        };
        s = laplace_update(&s, item, &obs, step as f64, &params).unwrap();
    }
    s
}

fn calibration() -> CalibrationDataFile {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let examples = (0..200)
        .map(|_| {
            let components = ScoreComponents {
                m: rng.random(),
                r: rng.random(),
                p: rng.random_range(-3.0..3.0),
                c: rng.random_range(-1.0..1.0),
                misc_mass: rng.random(),
                low_data: false,
            };
            let target = (0.6 * components.m + 0.3 * components.r - 0.2 * components.misc_mass)
                .clamp(0.0, 1.0);
            CalibrationExample { components, target }
        })
        .collect();
    CalibrationDataFile {
        version: FORMAT_VERSION,
        examples,
    }
}

pub fn write_fixtures(dir: &Path) -> Fixtures {
    let b = bank();
    let mut tight = b.clone();
    if let Some(gc) = tight.constraints.as_mut() {
        gc.bounds[1] = [-0.2, 0.2];
    }
    let f = Fixtures {
        dir: dir.to_path_buf(),
        bank: dir.join("bank.json"),
        tight_bank: dir.join("tight_bank.json"),
        state: dir.join("state.json"),
        log: dir.join("log.json"),
        calibration: dir.join("calibration.json"),
    };
    save_json(&f.bank, &b).unwrap();
    save_json(&f.tight_bank, &tight).unwrap();
    save_state(&f.state, &LearnerStateFile::new(state(&b))).unwrap();
    save_json(&f.log, &log(&b)).unwrap();
    save_json(&f.calibration, &calibration()).unwrap();
    f
}

pub fn snapshot(paths: &[&Path]) -> Vec<Vec<u8>> {
    paths.iter().map(|p| fs::read(p).unwrap()).collect()
}
