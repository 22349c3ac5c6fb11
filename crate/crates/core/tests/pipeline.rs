use std::collections::BTreeSet;
use std::fs;

use recall_lens::model::{forward_cache, Intervention, ModelConfig, WeightSet};
use recall_lens::suite::{run_suite, Analysis, RunConfig};
use recall_lens::train::{train, TrainConfig};
use recall_lens::world::{build_world, QueryInstance, StepVerdict, SynthWorld, WorldParams};

fn tiny_world() -> SynthWorld {
    build_world(&WorldParams { n_subjects: 6, n_relations: 1, objects_per_relation: 8, ..Default::default() }).unwrap()
}

fn tiny_model(world: &SynthWorld) -> WeightSet<f32> {
    let model = ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 16,
        d_head: 8,
        d_mlp: 32,
        ..ModelConfig::toy(world.vocab.len())
    };
    let config = TrainConfig { lr: 1e-2, batch_size: 16, steps: 400, eval_every: 0, ..Default::default() };
    train(&config, &model, world).unwrap().0
}

#[test]
fn step_inputs_are_prefixes_of_the_full_sequence() {
    let world = tiny_world();
    let w = WeightSet::<f32>::init(&ModelConfig::toy(world.vocab.len()), 3, 0.2).unwrap();
    for fact in &world.facts {
        let doc = world.render(fact, &fact.objects);
        let prompt_len = world.prompt(fact).len();
        let inst = QueryInstance::new(&world, fact, doc[prompt_len..].to_vec());
        assert!(inst.correct);
        let full = forward_cache(&w, &doc, &Intervention::none()).unwrap();
        for step in 1..=world.n_answers {
            let input = inst.step_input(step).unwrap();
            assert_eq!(&doc[..input.len()], &input[..]);
            assert_eq!(doc[input.len()], inst.answer_first_token(step - 1).unwrap());
            let prefix = forward_cache(&w, &input, &Intervention::none()).unwrap();
            let v = w.config.vocab;
            assert_eq!(prefix.last_logits(v), full.logits_at(input.len() - 1, v));
        }
    }
}

#[test]
fn suite_outputs_are_consistent_and_reproducible() {
    let world = tiny_world();
    let w = tiny_model(&world);
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig { trace_seeds: 2, ..Default::default() };
    let report = run_suite(&w, &world, &config, Some(&dir.path().join("a"))).unwrap();
    let s = &report.summary;

    let instances = recall_lens::eval::run_queries(&w, &world).unwrap();
    for step in 0..world.n_answers {
        let recount = instances.iter().filter(|i| i.verdicts[step] == StepVerdict::Correct).count();
        assert_eq!(s.step_correct[step], recount);
    }
    let admitted: BTreeSet<usize> = report.results.iter().map(|r| r.instance).collect();
    assert_eq!(admitted.len(), s.cohort);
    for inst in instances.iter().filter(|i| admitted.contains(&i.id)) {
        assert!(inst.verdicts.iter().all(|v| *v == StepVerdict::Correct));
        let distinct: BTreeSet<&Vec<u32>> = inst.answers.iter().map(|a| &a.tokens).collect();
        assert_eq!(distinct.len(), world.n_answers);
    }

    let (l, tracked) = (w.config.n_layers, 1 + world.n_answers);
    let body = fs::read_to_string(dir.path().join("a/logit_lens.csv")).unwrap();
    assert_eq!(body.lines().count() - 1, 2 * world.n_answers * l * tracked * (s.cohort + 1));
    let body = fs::read_to_string(dir.path().join("a/knockout.csv")).unwrap();
    let spans_per_instance: usize = (1..=world.n_answers).sum();
    assert_eq!(body.lines().count() - 1, spans_per_instance * l * tracked * (s.cohort + 1));
    for name in &s.files {
        assert!(dir.path().join("a").join(name).exists());
    }

    run_suite(&w, &world, &config, Some(&dir.path().join("b"))).unwrap();
    for name in s.files.iter().chain([&"summary.json".to_string()]) {
        assert_eq!(
            fs::read(dir.path().join("a").join(name)).unwrap(),
            fs::read(dir.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }

    let none = RunConfig { analyses: BTreeSet::new(), ..Default::default() };
    let r = run_suite(&w, &world, &none, Some(&dir.path().join("c"))).unwrap();
    assert!(r.csv_paths.is_empty());
    let names: Vec<_> = fs::read_dir(dir.path().join("c")).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, ["summary.json"]);
    assert!(!none.analyses.contains(&Analysis::Trace));
}
