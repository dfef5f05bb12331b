use super::{CategorySpec, DatagenError, DatasetManifest, GenConfig, Sample, TriggerEvent};
use crate::{par, seed, CategoryId, SampleId};
use rand::Rng;
use rand_distr::StandardNormal;

/// Relative scale of the second photograph's jitter around the first.
const PAIR_JITTER: f64 = 0.1;

/// Build the species universe and draw every sample. Pure in `config`.
pub fn generate_longtail_dataset(config: &GenConfig) -> Result<DatasetManifest, DatagenError> {
    config.validate()?;
    let abundances = config.abundance_profile();
    let mut means_rng = seed::stage_rng(config.seed, "cluster-means", 0);
    let categories: Vec<CategorySpec> = abundances
        .iter()
        .enumerate()
        .map(|(rank, &abundance)| CategorySpec {
            id: rank as CategoryId,
            name: format!("species_{rank:02}"),
            abundance,
            novelty_tag: config.tag_for_rank(rank),
            cluster_mean: (0..config.dim)
                .map(|_| config.prior_scale * means_rng.sample::<f64, _>(StandardNormal))
                .collect(),
            cluster_scale: config.cluster_scale,
        })
        .collect();

    let per_category = par::map(par::Execution::default(), &categories, |c| {
        draw_events(
            c,
            c.abundance / 2,
            seed::derive(config.seed, "samples", u64::from(c.id)),
        )
    });

    let mut events = Vec::new();
    let mut samples = Vec::new();
    for (cat, drawn) in categories.iter().zip(per_category) {
        for (a, b) in drawn {
            push_event(&mut events, &mut samples, cat.id, a, b);
        }
    }
    Ok(DatasetManifest {
        config: config.clone(),
        categories,
        events,
        samples,
    })
}

/// Draw a later collection of the given categories from the same clusters, appended to
/// a copy of `manifest`. Each category contributes `share` of its abundance (at least one
/// event). Returns the extended manifest and the new sample ids.
pub fn followup_collection(
    manifest: &DatasetManifest,
    categories: &[CategoryId],
    share: f64,
    seed_base: u64,
) -> (DatasetManifest, Vec<SampleId>) {
    let mut out = manifest.clone();
    let first_new = out.samples.len();
    let specs: Vec<&CategorySpec> = categories.iter().map(|&c| manifest.category(c)).collect();
    let drawn = par::map(par::Execution::default(), &specs, |c| {
        let n_events = (((c.abundance / 2) as f64 * share).round() as usize).max(1);
        draw_events(c, n_events, seed::derive(seed_base, "followup", u64::from(c.id)))
    });
    for (cat, pairs) in specs.iter().zip(drawn) {
        for (a, b) in pairs {
            push_event(&mut out.events, &mut out.samples, cat.id, a, b);
        }
    }
    let ids = (first_new as SampleId..out.samples.len() as SampleId).collect();
    (out, ids)
}

fn draw_events(cat: &CategorySpec, n_events: usize, seed_value: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = seed::rng(seed_value);
    let sigma = cat.cluster_scale;
    (0..n_events)
        .map(|_| {
            let first: Vec<f64> = cat
                .cluster_mean
                .iter()
                .map(|m| m + sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let second = first
                .iter()
                .map(|x| x + PAIR_JITTER * sigma * rng.sample::<f64, _>(StandardNormal))
                .collect();
            (first, second)
        })
        .collect()
}

fn push_event(
    events: &mut Vec<TriggerEvent>,
    samples: &mut Vec<Sample>,
    category: CategoryId,
    a: Vec<f64>,
    b: Vec<f64>,
) {
    let event_id = events.len() as u64;
    let first = samples.len() as SampleId;
    events.push(TriggerEvent {
        event_id,
        sample_ids: [first, first + 1],
        category_id: category,
    });
    for (offset, features) in [a, b].into_iter().enumerate() {
        samples.push(Sample {
            sample_id: first + offset as SampleId,
            event_id,
            features,
            true_category: category,
        });
    }
}
