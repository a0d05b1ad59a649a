//! Memory discipline: the streaming engine allocates its working buffers
//! at construction; steady-state `learn_one` calls must not allocate.
//!
//! Kept in its own test binary so the counting global allocator sees only
//! this test's traffic.

use std::alloc::{GlobalAlloc, Layout, System};
use std::sync::atomic::{AtomicU64, Ordering};

struct CountingAllocator;

static ALLOCATIONS: AtomicU64 = AtomicU64::new(0);

unsafe impl GlobalAlloc for CountingAllocator {
    unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
        ALLOCATIONS.fetch_add(1, Ordering::SeqCst);
        unsafe { System.alloc(layout) }
    }

    unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
        unsafe { System.dealloc(ptr, layout) }
    }

    unsafe fn realloc(&self, ptr: *mut u8, layout: Layout, new_size: usize) -> *mut u8 {
        ALLOCATIONS.fetch_add(1, Ordering::SeqCst);
        unsafe { System.realloc(ptr, layout, new_size) }
    }
}

#[global_allocator]
static ALLOCATOR: CountingAllocator = CountingAllocator;

use odtl_core::model::{ModelParams, Topology};
use odtl_core::odtl::{OdtlConfig, OdtlEngine, TileSize};
use odtl_core::rng::StreamRng;
use odtl_core::tensor::Tensor;

fn window(topo: &Topology, seed: u64) -> Tensor {
    let mut rng = StreamRng::seed(seed);
    let data = (0..topo.input_channels * topo.input_width)
        .map(|_| rng.next_symmetric(1.0))
        .collect();
    Tensor::from_vec(topo.input_channels, topo.input_width, data).unwrap()
}

#[test]
fn steady_state_learn_one_does_not_allocate() {
    let topo = Topology::new(2, 6, 3);
    let model = ModelParams::build(topo, 1).unwrap();
    let windows: Vec<Tensor> = (0..8).map(|i| window(&topo, 100 + i)).collect();

    for (name, tile) in [
        ("whole-layer", TileSize::WholeLayer),
        ("tiled", TileSize::Entries(17)),
    ] {
        let config = OdtlConfig::new(0.002, 0.9).with_tile_size(tile);
        let mut engine = OdtlEngine::new(&model, config).unwrap();

        // Warm up once, then demand zero allocations for 200 steps.
        engine.learn_one(&model, &windows[0], 0).unwrap();
        let before = ALLOCATIONS.load(Ordering::SeqCst);
        for step in 0..200usize {
            engine
                .learn_one(&model, &windows[step % windows.len()], step % 3)
                .unwrap();
        }
        let after = ALLOCATIONS.load(Ordering::SeqCst);
        assert_eq!(
            after - before,
            0,
            "{name}: learn_one allocated {} times in steady state",
            after - before
        );
    }
}
