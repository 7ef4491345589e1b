"""Parameter and time cost of swapping standard convolutions for DHiF.

Each DHiF layer at k = 3 adds a 9 x 81 projection and an 81-entry bias
(810 numbers) regardless of channel width.  Timings are best-of-N on this
machine and move around with load.
"""
from dhif.bench import run_bench


def main():
    res = run_bench(repeats=3)
    print("single layer, 16 -> 16 channels, 16 x 64 x 64 batch:")
    print(f"   conv {res['conv_seconds'] * 1e3:.1f} ms   dhif {res['dhif_seconds'] * 1e3:.1f} ms   "
          f"({res['dhif_slowdown']:.2f}x)")
    print(f"   parameters {res['conv_params']} -> {res['dhif_params']} (+{res['dhif_extra_params']})")
    print("mini-net with DHiF at levels 2 and 3:")
    print(f"   parameters {res['net_params_standard']} -> {res['net_params_dhif']} "
          f"(+{res['net_extra_params']} over {res['net_dhif_layers']} layers)")
    print(f"   forward throughput {res['images_per_sec_standard']:.0f} -> {res['images_per_sec_dhif']:.0f} "
          f"images/s ({100 * res['throughput_reduction']:.1f}% fewer)")


if __name__ == "__main__":
    main()
