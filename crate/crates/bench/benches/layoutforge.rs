use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use layoutforge_bench::{square_corpus, trained_checkpoint};
use layoutforge_core::autodiff::{Graph, Tensor};
use layoutforge_core::losses::{alignment_value_grad, overlap_value_grad};
use layoutforge_core::pipeline::{run_pipeline, ElementSpec, PipelineConfig};
use layoutforge_core::render::{render_batch, RenderItem};
use layoutforge_core::training::{generate_layouts, run_step, unfrozen, TrainingConfig};
use layoutforge_core::{Canvas, ModelCheckpoint};

fn losses(c: &mut Criterion) {
    let corpus = square_corpus(64, 2);
    let geoms: Vec<_> = corpus.iter().map(|l| l.geometries()).collect();
    c.bench_function("overlap_value_grad/64 layouts", |b| {
        b.iter(|| {
            geoms
                .iter()
                .map(|g| overlap_value_grad(black_box(g)).value)
                .sum::<f64>()
        })
    });
    c.bench_function("alignment_value_grad/64 layouts", |b| {
        b.iter(|| {
            geoms
                .iter()
                .map(|g| alignment_value_grad(black_box(g)).value)
                .sum::<f64>()
        })
    });
}

fn render(c: &mut Criterion) {
    let corpus = square_corpus(32, 3);
    let mut rows = Vec::new();
    let mut items = Vec::new();
    for l in &corpus {
        items.push(RenderItem {
            start: rows.len() / 4,
            class_probs: l.elements.iter().map(|e| e.class_probs.clone()).collect(),
            mask: None,
        });
        rows.extend(l.geometries().iter().flat_map(|g| g.to_array()));
    }
    let n = rows.len() / 4;
    c.bench_function("render_batch/32 layouts 64x64 forward+backward", |b| {
        b.iter(|| {
            let mut graph = Graph::new();
            let g = graph.param(Tensor::new(vec![n, 4], rows.clone()));
            let img = render_batch(&mut graph, g, &items, 64, 64, 6);
            let loss = graph.sum(img);
            black_box(graph.backward(loss));
        })
    });
}

fn inference(c: &mut Criterion) {
    let ckpt = trained_checkpoint(false);
    let conditions: Vec<_> = square_corpus(8, 4).iter().map(unfrozen).collect();
    c.bench_function("generate_layouts/single layout", |b| {
        b.iter(|| generate_layouts(&ckpt, black_box(&conditions[..1]), 0).unwrap())
    });
    let specs = vec![
        ElementSpec {
            class: "headline".into(),
            s: 0.05,
            r: 0.0,
            order: None,
        },
        ElementSpec {
            class: "product_image".into(),
            s: 0.12,
            r: 0.75,
            order: None,
        },
        ElementSpec {
            class: "button".into(),
            s: 0.015,
            r: 0.0,
            order: None,
        },
    ];
    let canvas = Canvas::new(400, 400).unwrap();
    let cfg = PipelineConfig::default();
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("run_pipeline/64 candidates", |b| {
        b.iter(|| run_pipeline(&specs, &canvas, &ckpt, &cfg).unwrap())
    });
    group.finish();
}

fn training(c: &mut Criterion) {
    let corpus = square_corpus(64, 5);
    let cfg = TrainingConfig {
        batch_size: 16,
        aspect_class: Some(layoutforge_core::AspectClass::Square),
        ..TrainingConfig::default()
    };
    let mut state = ModelCheckpoint::initialize(cfg.model_config(), 0).unwrap();
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    group.bench_function("run_step/batch 16", |b| {
        b.iter(|| run_step(&cfg, &mut state, &corpus).unwrap())
    });
    group.finish();
}

criterion_group!(benches, losses, render, inference, training);
criterion_main!(benches);
