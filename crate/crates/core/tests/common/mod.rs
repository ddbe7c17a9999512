#![allow(dead_code)]

pub mod oracles;

use std::path::{Path, PathBuf};

use deskmanip_core::executor::{Executor, ExecutorConfig, ExecutionReport, TaskSpec};
use deskmanip_core::kinematics::ArmModel;
use deskmanip_core::reasoner::{scripted_reasoner, Reasoner, TaskPlan};
use deskmanip_core::sim::Scene;
use serde_json::json;

/// Resolves through `../core` so the CLI tests can share this module.
pub fn fixture(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures").join(rel)
}

pub struct Setup {
    pub scene: Scene,
    pub reasoner: Reasoner,
    pub plan: TaskPlan,
}

/// Scene, scripted reasoner and plan for `scenes/<scene>.json` driven by
/// `tasks/<task>.json`.
pub fn setup(scene: &str, task: &str) -> Setup {
    let scene = Scene::load(&fixture(&format!("scenes/{scene}.json"))).unwrap();
    let task = TaskSpec::load(&fixture(&format!("tasks/{task}.json"))).unwrap();
    let reasoner = scripted_reasoner(task.reasoner_fixture.as_ref().unwrap(), None).unwrap();
    let summary = json!({ "scene": scene.spec.name, "objects": scene.spec.objects.len() });
    let plan = reasoner.plan(&task.instruction, &summary).unwrap();
    Setup {
        scene,
        reasoner,
        plan,
    }
}

pub fn run(scene: &str, task: &str, seed: u64) -> ExecutionReport {
    let s = setup(scene, task);
    let arm = ArmModel::builtin(&s.scene.spec.arm).unwrap();
    let mut cfg = ExecutorConfig::default();
    cfg.mppi.seed = seed;
    Executor {
        scene: &s.scene,
        arm: &arm,
        reasoner: &s.reasoner,
        cfg,
    }
    .run(&s.plan)
    .unwrap()
}

/// Structural JSON equality with numbers compared to `rel` relative
/// tolerance. Returns the path of the first mismatch.
pub fn json_close(a: &serde_json::Value, b: &serde_json::Value, rel: f64) -> Result<(), String> {
    use serde_json::Value;
    fn walk(a: &Value, b: &Value, rel: f64, path: &mut String) -> Result<(), String> {
        match (a, b) {
            (Value::Number(x), Value::Number(y)) => {
                let (x, y) = (x.as_f64().unwrap(), y.as_f64().unwrap());
                if (x - y).abs() <= rel * x.abs().max(y.abs()).max(1e-300) || x == y {
                    Ok(())
                } else {
                    Err(format!("{path}: {x} vs {y}"))
                }
            }
            (Value::Array(x), Value::Array(y)) if x.len() == y.len() => {
                for (i, (p, q)) in x.iter().zip(y).enumerate() {
                    let n = path.len();
                    path.push_str(&format!("[{i}]"));
                    walk(p, q, rel, path)?;
                    path.truncate(n);
                }
                Ok(())
            }
            (Value::Object(x), Value::Object(y)) if x.len() == y.len() => {
                for (k, p) in x {
                    let q = y.get(k).ok_or_else(|| format!("{path}.{k}: missing"))?;
                    let n = path.len();
                    path.push('.');
                    path.push_str(k);
                    walk(p, q, rel, path)?;
                    path.truncate(n);
                }
                Ok(())
            }
            _ if a == b => Ok(()),
            _ => Err(format!("{path}: {a} vs {b}")),
        }
    }
    walk(a, b, rel, &mut String::new())
}
