fn main() {
    for run in 0..3 {
        let rep = hatfc::bench::time_scaling(&[512, 1024, 2048], 32, 64, 9).unwrap();
        print!("run {run}: ");
        for r in &rep.rows {
            if r.mode == "windowed" {
                print!("L={} {:.0}us  ", r.l, r.median_seconds * 1e6);
            }
        }
        println!("slope {:.3} r2 {:.3}", rep.windowed_slope, rep.windowed_r2);
    }
}
