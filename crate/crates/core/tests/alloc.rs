//! Peak heap use of a training run must not grow with the epoch count
//! beyond the per-epoch log rows.

use gridlearn::datagen::{generate, GenConfig};
use gridlearn::trainer::{train, LogRow, TrainConfig, TrainOptions, Variant};
use gridlearn::{cases, SolverConfig};
use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicUsize, Ordering};

struct Counting;

static LIVE: AtomicUsize = AtomicUsize::new(0);
static PEAK: AtomicUsize = AtomicUsize::new(0);

unsafe impl GlobalAlloc for Counting {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        let p = unsafe { System.alloc(layout) };
        if !p.is_null() {
            let now = LIVE.fetch_add(layout.size(), Ordering::SeqCst) + layout.size();
            PEAK.fetch_max(now, Ordering::SeqCst);
        }
        p
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) };
        LIVE.fetch_sub(layout.size(), Ordering::SeqCst);
    }
}

#[global_allocator]
static GLOBAL: Counting = Counting;

#[test]
fn peak_memory_is_flat_across_epochs() {
    let net = cases::network("case9");
    let ds = generate(&net, &GenConfig { n_points: 60, seed: 2, ..Default::default() }, &SolverConfig::default(), 1)
        .unwrap();
    let base = TrainConfig { rho: 10.0, u_lambda: 2, hidden: vec![64, 64], ..TrainConfig::for_variant(Variant::Mcd) };
    let peak_above_start = |epochs: usize| {
        let c = TrainConfig { max_epochs: epochs, ..base.clone() };
        let start = LIVE.load(Ordering::SeqCst);
        PEAK.store(start, Ordering::SeqCst);
        let out = train(&net, &ds, &c, TrainOptions::default()).unwrap();
        let peak = PEAK.load(Ordering::SeqCst) - start;
        (peak, out.checkpoint.model.n_params())
    };
    let (short, n_params) = peak_above_start(3);
    let (long, _) = peak_above_start(40);
    let log_rows = 64 * std::mem::size_of::<LogRow>();
    let param_bytes = n_params * std::mem::size_of::<f64>();
    assert!(param_bytes > 8 * log_rows);
    assert!(long <= short + log_rows, "peak {short} B after 3 epochs, {long} B after 40");
}
