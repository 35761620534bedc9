// Gradient magnitude anatomy: flow vs dispersion at stage-1 start and mid.
use prefmod::adapters::AdapterPair;
use prefmod::config::Variant;
use prefmod::losses::{dispersion_loss, flow_loss, interpolate};
use prefmod::rng::{derive_seed, Rng};
use prefmod::synth::*;
use prefmod::tensor::{GradMap, Tape, Tensor};
use prefmod::training::{preference_deltas, stage1_initial_state, Checkpoint};

fn grad_stats(grads: &GradMap, prefix: &str) -> (f64, f64) {
    let mut sum = 0.0;
    let mut n = 0usize;
    let mut max = 0.0f64;
    for (name, g) in grads.iter() {
        if name.starts_with(prefix) {
            for v in g.data() {
                sum += v.abs();
                max = max.max(v.abs());
                n += 1;
            }
        }
    }
    (sum / n.max(1) as f64, max)
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let base = Checkpoint::load(std::path::Path::new(&args[1])).unwrap();
    let data = Dataset::load(std::path::Path::new(&args[2])).unwrap();
    let config = base.config.clone();
    let (mut adapters, bank) = stage1_initial_state(&data, &config);
    // after a nudge: simulate slightly-trained adapters by randomizing heads
    for trial in ["zero-init", "nudged"] {
        if trial == "nudged" {
            let mut rng = Rng::seed_from(4);
            adapters = AdapterPair::init(&config.adapter, config.backbone.d_model, config.backbone.d_mod, config.backbone.blocks, 99);
            let z = |t: &Tensor, rng: &mut Rng| Tensor::new(t.shape().to_vec(), rng.normal_vec(t.numel(), 0.01)).unwrap();
            adapters.shared.head_w = z(&adapters.shared.head_w, &mut rng);
            adapters.distinct.head_w = z(&adapters.distinct.head_w, &mut rng);
        }
        let mut rng = Rng::seed_from(derive_seed(11, &[0x90d]));
        let samples = data.train_samples();
        for loss_kind in ["flow", "disp"] {
            let mut tape = Tape::new();
            let bb = base.backbone.bind(&mut tape, "backbone", false).unwrap();
            let ad = adapters.bind(&mut tape, "adapter", true).unwrap();
            let empty = bb.encode_prompt(&mut tape, &Prompt::Empty).unwrap();
            let users: Vec<u32> = data.train_users().iter().map(|u| u.user_id).collect();
            let mut bound_users = std::collections::BTreeMap::new();
            for &uid in users.iter().take(8) {
                bound_users.insert(uid, tape.param(&format!("bank.user{uid:04}"), &bank.get(uid).unwrap().matrix).unwrap());
            }
            let loss = if loss_kind == "flow" {
                let mut terms = vec![];
                for k in 0..16 {
                    let s = samples[k * 11 % samples.len()];
                    let t = rng.next_f64();
                    let z1 = Tensor::new(s.image.shape().to_vec(), rng.normal_vec(s.image.numel(), 1.0)).unwrap();
                    let enc = bb.encode_prompt(&mut tape, &s.prompt).unwrap();
                    let z_t = interpolate(&mut tape, &s.image, &z1, t).unwrap();
                    let deltas = preference_deltas(&mut tape, &ad, &enc, &empty, &bound_users[&s.user_id], Variant::Full).unwrap();
                    let v = bb.velocity(&mut tape, &z_t, &enc, t, Some(&deltas), None).unwrap();
                    terms.push(flow_loss(&mut tape, &v, &s.image, &z1).unwrap());
                }
                let refs: Vec<&Tensor> = terms.iter().collect();
                let st = tape.concat(&refs, 0).unwrap();
                tape.mean(&st).unwrap()
            } else {
                let mut sh = vec![]; let mut di = vec![];
                for &uid in users.iter().take(8) {
                    let d = preference_deltas(&mut tape, &ad, &empty, &empty, &bound_users[&uid], Variant::Full).unwrap();
                    let fs = d.flat_shared(&mut tape).unwrap();
                    let fd = d.flat_distinct(&mut tape).unwrap();
                    sh.push((uid, fs)); di.push((uid, fd));
                }
                let a = dispersion_loss(&mut tape, &sh).unwrap();
                let b = dispersion_loss(&mut tape, &di).unwrap();
                let sum = tape.add(&a, &b).unwrap();
                tape.scale(&sum, 0.5).unwrap()   // unweighted per-adapter mean
            };
            let grads = tape.backward(&loss).unwrap();
            let (am, ax) = grad_stats(&grads, "adapter.");
            let (bm, bx) = grad_stats(&grads, "bank.");
            println!("{trial:9} {loss_kind}: loss {:+.4} | adapter mean|g| {am:.2e} max {ax:.2e} | bank mean|g| {bm:.2e} max {bx:.2e}", loss.item());
        }
    }
}
