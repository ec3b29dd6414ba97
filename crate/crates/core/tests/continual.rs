use std::path::Path;

use pfcl_core::eval::{accuracy, avg_accuracy, evaluate_all, Protocol};
use pfcl_core::experiment::{build_aux, build_stream, parse_spec};
use pfcl_core::linalg::{Matrix, Rng};
use pfcl_core::losses::cross_entropy;
use pfcl_core::nn::MlpModel;
use pfcl_core::tasks::{make_gaussian_dataset, split_class_stream, TaskStream};
use pfcl_core::trainer::{pfcl_loss, run_continual, train_first_task, Method, Session, TrainConfig};

fn cfg(method: Method) -> TrainConfig {
    TrainConfig {
        epochs_per_task: 10,
        batch_n: 32,
        k_select: 32,
        lr: 0.1,
        hidden: vec![32],
        method,
        ..TrainConfig::default()
    }
}

fn gauss_stream(classes: usize, tasks: usize, sep: f64, seed: u64) -> TaskStream {
    let base = make_gaussian_dataset(classes, 20, sep, 200, &mut Rng::new(seed)).unwrap();
    split_class_stream(&base, tasks).unwrap()
}

fn jt_accuracy(sep: f64) -> f64 {
    let stream = gauss_stream(10, 1, sep, 1);
    let out = run_continual(&stream, None, &cfg(Method::Jt)).unwrap();
    avg_accuracy(&out.matrix).unwrap()
}

#[test]
fn separation_controls_joint_accuracy() {
    let chance = jt_accuracy(0.0);
    assert!((chance - 0.1).abs() <= 0.05, "JT at separation 0: {chance}");
    let easy = jt_accuracy(10.0);
    assert!(easy >= 0.98, "JT at separation 10: {easy}");
}

#[test]
fn untrained_model_task_il_is_chance() {
    let stream = gauss_stream(10, 5, 4.0, 2);
    let mut rng = Rng::new(9);
    let mut total = 0.0;
    let trials = 20;
    for _ in 0..trials {
        let model = MlpModel::new(&[20, 32, 10], &mut rng).unwrap();
        let row = evaluate_all(&model, &stream, Protocol::TaskIl).unwrap();
        total += row.iter().sum::<f64>() / row.len() as f64;
    }
    let mean = total / trials as f64;
    assert!((mean - 0.5).abs() <= 0.05, "mean task-IL accuracy {mean}");
}

#[test]
fn masked_accuracy_dominates_for_trained_models() {
    let stream = gauss_stream(6, 3, 3.0, 4);
    for method in [Method::Ft, Method::KdOnly] {
        let out = run_continual(&stream, None, &cfg(method)).unwrap();
        let til = out.task_il.unwrap();
        for i in 0..3 {
            for (a, b) in til.row(i).unwrap().iter().zip(out.matrix.row(i).unwrap()) {
                assert!(a >= b);
            }
        }
    }
}

#[test]
fn distillation_keeps_first_task_better_than_fine_tuning() {
    let stream = gauss_stream(4, 2, 3.0, 5);
    let ft = run_continual(&stream, None, &cfg(Method::Ft)).unwrap();
    let kd = run_continual(&stream, None, &cfg(Method::KdOnly)).unwrap();
    let (ft_first, kd_first) = (ft.matrix.get(1, 0).unwrap(), kd.matrix.get(1, 0).unwrap());
    assert!(kd_first > ft_first, "task 1 after task 2: kd {kd_first}, ft {ft_first}");
}

fn gauss_benchmark() -> (TaskStream, TrainConfig) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../benchmarks/gauss10-5.toml");
    let spec = parse_spec(path).unwrap();
    (build_stream(&spec.stream).unwrap(), spec.train)
}

#[test]
fn fine_tuning_forgets_everything_but_the_last_task() {
    let (stream, train) = gauss_benchmark();
    let out = run_continual(&stream, None, &train.with_method(Method::Ft)).unwrap();
    let last = out.matrix.row(4).unwrap();
    assert!(last[4] >= 0.9, "{last:?}");
    // Two classes per task among ten: anything but the last task sits at or
    // below chance for the single head.
    assert!(last[..4].iter().all(|&a| a <= 0.2), "{last:?}");
}

#[test]
fn kd_only_task_il_is_at_least_fine_tuning() {
    let (stream, train) = gauss_benchmark();
    let til = |m| {
        let out = run_continual(&stream, None, &train.with_method(m)).unwrap();
        avg_accuracy(&out.task_il.unwrap()).unwrap()
    };
    let (ft, kd) = (til(Method::Ft), til(Method::KdOnly));
    assert!(kd >= ft, "task-IL kd_only {kd}, ft {ft}");
}

#[test]
fn joint_training_matches_direct_pooled_training() {
    let stream = gauss_stream(6, 3, 3.0, 6);
    let c = cfg(Method::Jt);
    let jt = avg_accuracy(&run_continual(&stream, None, &c).unwrap().matrix).unwrap();

    let pooled = stream.pooled_train().unwrap();
    let mut model = Session::new(&c, None)
        .unwrap()
        .init_model(stream.dim(), stream.total_classes())
        .unwrap();
    train_first_task(&mut model, &pooled, &c).unwrap();
    let direct: f64 = stream
        .tasks()
        .iter()
        .map(|t| accuracy(&model, &t.test, None).unwrap())
        .sum::<f64>()
        / stream.len() as f64;
    assert!((jt - direct).abs() <= 0.02, "jt {jt}, direct {direct}");
}

#[test]
fn agreeing_models_with_aux_only_selection_give_pure_ce_gradient() {
    let mut rng = Rng::new(12);
    let model = MlpModel::new(&[5, 8, 4], &mut rng).unwrap();
    let old = model.snapshot();
    let x = Matrix::new(8, 5, (0..40).map(|_| rng.normal()).collect()).unwrap();
    let labels = [0, 1, 2, 3];
    let (z, _) = model.forward(&x).unwrap();
    let z_old = old.logits(&x).unwrap();
    let loss = pfcl_loss(&z, &z_old, &labels, 4, &TrainConfig::default()).unwrap();
    let ce = cross_entropy(&z.select_rows(&[0, 1, 2, 3]).unwrap(), &labels).unwrap();
    for r in 0..4 {
        for (a, b) in loss.dlogits.row(r).iter().zip(ce.dlogits.row(r)) {
            assert!((a - b).abs() <= 1e-15, "row {r}: {a} vs {b}");
        }
    }
    for r in 4..8 {
        assert!(loss.dlogits.row(r).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn benchmark_pool_matches_stream_dimension() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../benchmarks/rot-digits-20.toml");
    let spec = parse_spec(path).unwrap();
    let stream = build_stream(&spec.stream).unwrap();
    let aux = build_aux(&spec.aux, &stream).unwrap().unwrap();
    assert_eq!(stream.len(), 20);
    assert_eq!(stream.total_classes(), 5);
    assert_eq!(aux.dim(), stream.dim());
    assert_eq!(stream.image_shape(), Some((8, 8)));
}
