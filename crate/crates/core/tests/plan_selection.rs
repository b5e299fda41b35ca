//! `select_plan` against exhaustive evaluation.

use std::collections::BTreeMap;

use proptest::prelude::*;
use skelflow::expr::{Bindings, Expr};
use skelflow::manager::{select_plan, Action, ReconfigurationPlan, WORKERS};
use skelflow::QosContract;

fn plan_strategy() -> impl Strategy<Value = ReconfigurationPlan> {
    prop_oneof![
        (1usize..5).prop_map(ReconfigurationPlan::linear_add),
        (1usize..3).prop_map(ReconfigurationPlan::linear_remove),
        (0usize..4, -3.0f64..3.0).prop_map(|(k, scale)| ReconfigurationPlan {
            name: format!("custom{k}"),
            actions: vec![Action::AddWorker(k)],
            forecast: vec![("lat".into(), format!("lat * {scale}").parse().unwrap())],
        }),
    ]
}

fn brute_force(plans: &[ReconfigurationPlan], b: &Bindings, c: &QosContract) -> Option<usize> {
    let valid: Vec<usize> = (0..plans.len())
        .filter(|&i| {
            let mut over = b.clone();
            for (var, e) in &plans[i].forecast {
                if c.vars().contains(var) {
                    match e.eval_num(b) {
                        Ok(v) => {
                            over.insert(var.clone(), v);
                        }
                        Err(_) => return false,
                    }
                }
            }
            c.holds(&over).unwrap_or(false)
        })
        .collect();
    let fewest = valid.iter().map(|&i| plans[i].added_workers()).min()?;
    valid.into_iter().find(|&i| plans[i].added_workers() == fewest)
}

proptest! {
    #[test]
    fn agrees_with_exhaustive_search(
        plans in prop::collection::vec(plan_strategy(), 0..6),
        thr in 0.0f64..10.0,
        lat in 0.0f64..5.0,
        workers in 1u32..8,
        target in 0.5f64..12.0,
        with_lat in any::<bool>(),
    ) {
        let b: Bindings = BTreeMap::from([
            ("throughput".to_string(), thr),
            ("lat".to_string(), lat),
            (WORKERS.to_string(), workers as f64),
        ]);
        let (vars, expr): (Vec<&str>, String) = if with_lat {
            (vec!["throughput", "lat", WORKERS], format!("throughput > {target} && lat < 2"))
        } else {
            (vec!["throughput", WORKERS], format!("throughput > {target}"))
        };
        let c = QosContract::new(vars, expr.parse::<Expr>().unwrap()).unwrap();
        let (chosen, verdicts) = select_plan(&plans, &b, &c);
        prop_assert_eq!(verdicts.len(), plans.len());
        prop_assert_eq!(chosen, brute_force(&plans, &b, &c));
    }
}
