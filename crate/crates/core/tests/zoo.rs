use modbench::rulegen::{sample_batch, sample_task, Family, Mode, Shift, TaskOptions};
use modbench::tensor::Tape;
use modbench::train::loss;
use modbench::zoo::{Level, Model, ModelConfig};

#[test]
fn capacities_are_matched_across_levels_at_large_budgets() {
    let capacity = 60_000;
    for family in Family::ALL {
        let task = sample_task(family, 4, 3, &TaskOptions::default()).unwrap();
        for level in [Level::GtModular, Level::Modular, Level::Monolithic] {
            let model = Model::build(&ModelConfig::for_task(level, &task, capacity), 1).unwrap();
            let params = model.param_count();
            assert!(params <= capacity, "{family} {level}: {params}");
            let gap = (capacity - params) as f64 / capacity as f64;
            assert!(gap < 0.05, "{family} {level}: {params} of {capacity}");
        }
    }
}

#[test]
fn identical_modules_share_activation_evenly() {
    for family in Family::ALL {
        let task = sample_task(family, 3, 5, &TaskOptions::default()).unwrap();
        let mut model = Model::build(&ModelConfig::for_task(Level::Modular, &task, 12_000), 2).unwrap();
        let names: Vec<String> = model.store.iter().map(|p| p.name.clone()).collect();
        for name in &names {
            let Some(rest) = name.strip_prefix("module").and_then(|s| s.split_once('.')).filter(|(m, _)| *m != "0") else {
                continue;
            };
            let source = model.store.find(&format!("module0.{}", rest.1)).unwrap();
            let value = model.store.value(source).clone();
            let id = model.store.find(name).unwrap();
            model.store.replace(id, value);
        }
        let batch = sample_batch(&task, 16, Mode::Regression, Shift::InDistribution, 7).unwrap();
        let (_, acts) = model.predict(&batch).unwrap();
        for p in acts {
            assert!((p - 1.0 / 3.0).abs() < 1e-12, "{family}: {p}");
        }
    }
}

#[test]
fn ground_truth_routing_only_trains_the_selected_module() {
    for family in Family::ALL {
        let task = sample_task(family, 3, 9, &TaskOptions::default()).unwrap();
        let mut model = Model::build(&ModelConfig::for_task(Level::GtModular, &task, 12_000), 4).unwrap();
        let mut batch = sample_batch(&task, 8, Mode::Regression, Shift::InDistribution, 11).unwrap();
        // Keep the labels but claim every point follows rule 1.
        batch.rule_ids.iter_mut().for_each(|c| *c = 1);
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &batch).unwrap();
        let l = loss(&mut tape, Mode::Regression, out.prediction, &batch.labels).unwrap();
        model.store.zero_gradients();
        tape.backward_into(l, &mut model.store).unwrap();
        for p in model.store.iter().filter(|p| p.name.starts_with("module") && !p.name.starts_with("module1.")) {
            assert!(p.grad.data().iter().all(|&g| g == 0.0), "{family}: {} received gradient", p.name);
        }
        let selected: f64 = model.store.iter().filter(|p| p.name.starts_with("module1.")).map(|p| p.grad.data().iter().map(|g| g * g).sum::<f64>()).sum();
        assert!(selected > 0.0, "{family}: selected module got no gradient");
    }
}

#[test]
fn evaluation_leaves_parameters_untouched() {
    let task = sample_task(Family::Mha, 2, 13, &TaskOptions::default()).unwrap();
    let model = Model::build(&ModelConfig::for_task(Level::Modular, &task, 8000), 5).unwrap();
    let before = model.store.checksum();
    modbench::train::evaluate(&model, &task, Mode::Classification, Shift::SeqLen(20), 300, 1).unwrap();
    assert_eq!(model.store.checksum(), before);
}
