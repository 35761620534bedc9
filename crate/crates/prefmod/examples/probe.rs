// Checkpoint quality probe: loss/delta trails plus conditioning quality.
use prefmod::eval::expected_random_style_error;
use prefmod::sampling::SampleSource;
use prefmod::synth::*;
use prefmod::training::Checkpoint;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ck = Checkpoint::load(std::path::Path::new(&args[1])).unwrap();
    let data = Dataset::load(std::path::Path::new(&args[2])).unwrap();
    let source = SampleSource::from_checkpoint(&ck);
    let losses: Vec<f64> = ck.metrics.iter().filter(|m| m.name == "flow_loss").map(|m| m.value).collect();
    if losses.len() >= 100 {
        let w = |a: usize, b: usize| losses[a..b.min(losses.len())].iter().sum::<f64>() / (b.min(losses.len()) - a) as f64;
        println!("flow windows: first {:.4}, mid {:.4}, last {:.4}",
            w(0,100), w(losses.len()/2-50, losses.len()/2+50), w(losses.len()-100, losses.len()));
    }
    let trail = |name: &str| {
        let vals: Vec<(u64, f64)> = ck.metrics.iter().filter(|m| m.name == name).map(|m| (m.step, m.value)).collect();
        if !vals.is_empty() {
            let pick: Vec<String> = vals.iter().step_by((vals.len()/6).max(1)).map(|(s,v)| format!("{s}:{v:.3}")).collect();
            println!("{name}: {}", pick.join(" "));
        }
    };
    trail("delta_scale");
    trail("delta_separation");

    let mut content = 0.0; let mut n = 0.0;
    let mut uncond_err_all = 0.0;
    for (pi, prompt) in EVAL_PROMPTS.iter().enumerate() {
        for si in 0..3u64 {
            let img = source.sample(prompt, None, &ck.config.sampler, 1000 + 17*pi as u64 + si).unwrap();
            content += content_check(&img, prompt);
            let est = estimate_style(&img);
            for u in data.train_users() { uncond_err_all += est.error_against(&u.style); }
            n += 1.0;
        }
    }
    let expect: f64 = data.train_users().iter().map(|u| expected_random_style_error(&u.style, 0.09)).sum::<f64>() / data.train_users().len() as f64;
    println!("uncond: content {:.3}, style err {:.3} (prior expectation {:.3})",
        content / n, uncond_err_all / (n * data.train_users().len() as f64), expect);

    if let Some(bank) = &ck.bank {
        let mut cond_content = 0.0;
        let cells = 27.0;
        let mut better = 0;
        let mut cond_sum = 0.0; let mut uncond_sum = 0.0;
        for user in data.train_users() {
            let emb = &bank.get(user.user_id).unwrap().matrix;
            let mut ce = 0.0; let mut ue = 0.0;
            for (pi, prompt) in EVAL_PROMPTS.iter().enumerate() {
                for si in 0..3u64 {
                    let seed = 2000 + 31*pi as u64 + si;
                    let img = source.sample(prompt, Some(emb), &ck.config.sampler, seed).unwrap();
                    let base = source.sample(prompt, None, &ck.config.sampler, seed).unwrap();
                    ce += estimate_style(&img).error_against(&user.style);
                    ue += estimate_style(&base).error_against(&user.style);
                    cond_content += content_check(&img, prompt);
                }
            }
            if ce < ue { better += 1; }
            cond_sum += ce; uncond_sum += ue;
            print!(" u{}:{:.0}%", user.user_id, 100.0 * ce / ue);
        }
        println!();
        println!("cond content {:.3}; better {}/{}; mean ratio {:.3}",
            cond_content / (cells * 8.0), better, 8, cond_sum / uncond_sum);
    }
}
