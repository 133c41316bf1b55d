use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use udrift::par::{self, Exec};
use udrift::sync::{compute_signatures_with, strong_checksum};

fn data(len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(1).fill(&mut v[..]);
    v
}

fn signatures(c: &mut Criterion) {
    let input = data(32 << 20);
    let mut group = c.benchmark_group("signatures");
    group.throughput(Throughput::Bytes(input.len() as u64));
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(BenchmarkId::new(format!("{exec:?}"), "32MiB/2048"), &input, |b, d| {
            b.iter(|| compute_signatures_with(black_box(d), 2048, exec).unwrap())
        });
    }
    group.finish();
}

fn file_digests(c: &mut Criterion) {
    let files: Vec<Vec<u8>> = (0..64).map(|i| data(256 << 10 | i)).collect();
    let total: usize = files.iter().map(Vec::len).sum();
    let mut group = c.benchmark_group("file_digests");
    group.throughput(Throughput::Bytes(total as u64));
    group.sample_size(10);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| b.iter(|| par::map(black_box(&files), exec, |f| strong_checksum(f))));
    }
    group.finish();
}

criterion_group!(benches, signatures, file_digests);
criterion_main!(benches);
