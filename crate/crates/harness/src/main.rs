use lara_harness::alloc::TrackingAllocator;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

fn main() {
    std::process::exit(lara_harness::cli::main_with(std::env::args_os().collect()));
}
