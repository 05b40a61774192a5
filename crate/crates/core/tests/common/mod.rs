#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use policybank::bank::BankSnapshot;
use policybank::environment::DomainBundle;
use policybank::evaluation::{StreamSink, TaskRecord};
use policybank::provider::{FixtureStore, ReplayProvider};
use policybank::runtime::{Providers, ReviewRecord};
use policybank::{call_id, TaskSpec, Termination, Trajectory, Turn};

pub fn shipped_fixtures() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/replay"))
}

pub fn replay_providers() -> Providers {
    let store = FixtureStore::open(shipped_fixtures()).expect("shipped fixture store opens");
    Providers::uniform(Arc::new(ReplayProvider::new(store)))
}

type StreamKey = (u64, u32, String);

/// Keeps reviews, snapshots, trajectories and records in memory.
#[derive(Default)]
pub struct MemorySink {
    pub reviews: Mutex<BTreeMap<StreamKey, (ReviewRecord, BankSnapshot)>>,
    pub trajectories: Mutex<BTreeMap<StreamKey, Trajectory>>,
    pub records: Mutex<BTreeMap<StreamKey, TaskRecord>>,
}

impl MemorySink {
    pub fn snapshot_after(&self, seed: u64, trial: u32, task_id: &str) -> Option<BankSnapshot> {
        self.reviews
            .lock()
            .unwrap()
            .get(&(seed, trial, task_id.to_string()))
            .map(|(_, s)| s.clone())
    }

    pub fn trajectory_hashes(&self) -> BTreeMap<StreamKey, String> {
        self.trajectories
            .lock()
            .unwrap()
            .iter()
            .map(|(k, t)| (k.clone(), t.hash().unwrap()))
            .collect()
    }
}

impl StreamSink for MemorySink {
    fn put_trajectory(&self, seed: u64, trial: u32, traj: &Trajectory) -> Result<(), String> {
        self.trajectories
            .lock()
            .unwrap()
            .insert((seed, trial, traj.task_id.clone()), traj.clone());
        Ok(())
    }

    fn put_review(&self, seed: u64, trial: u32, review: &ReviewRecord, snapshot: &BankSnapshot) -> Result<(), String> {
        self.reviews.lock().unwrap().insert(
            (seed, trial, review.task_id.clone()),
            (review.clone(), snapshot.clone()),
        );
        Ok(())
    }

    fn put_task_record(&self, seed: u64, trial: u32, record: &TaskRecord) -> Result<(), String> {
        self.records
            .lock()
            .unwrap()
            .insert((seed, trial, record.task_id.clone()), record.clone());
        Ok(())
    }
}

/// A hand-built trace that performs the given ground-truth actions in order
/// and closes with `closing` as the assistant's last message.
pub fn synthetic_trace(bundle: &DomainBundle, task: &TaskSpec, skip_tools: &[String], closing: &str) -> Trajectory {
    let mut turns = vec![Turn::user(0, task.user_scenario.clone())];
    let mut db = bundle.initial_db.clone();
    let mut ordinal = 0;
    for pattern in &task.groundtruth.actions {
        if skip_tools.contains(&pattern.tool_name) {
            continue;
        }
        ordinal += 1;
        let mut call = pattern.concrete_call();
        call.call_id = call_id(ordinal);
        let (next, output) = bundle
            .execute(&db, &call)
            .unwrap_or_else(|e| panic!("{}: ground-truth call {} failed: {e}", task.task_id, call.signature()));
        db = next;
        let index = turns.len();
        turns.push(Turn::assistant(index, None, vec![call.clone()]));
        turns.push(Turn::tool_result(index + 1, call.call_id.clone(), output));
    }
    let index = turns.len();
    turns.push(Turn::assistant(index, Some(closing.to_string()), Vec::new()));
    Trajectory {
        task_id: task.task_id.clone(),
        trial: 1,
        seed: 0,
        turns,
        final_db: db,
        retrievals: Vec::new(),
        termination: Termination::UserStop,
    }
}

/// The closing message of an agent that conveys every required fact.
pub fn oracle_closing(task: &TaskSpec) -> String {
    let mut text = String::from("All done.");
    for info in &task.groundtruth.communicate_info {
        text.push(' ');
        text.push_str(info);
        text.push('.');
    }
    text
}
