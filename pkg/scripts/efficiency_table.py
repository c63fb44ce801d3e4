"""Prefill FLOPs and KV-cache size versus retained visual tokens, for every preset."""

from progdistill import effmodel as E

RETAINED = (576, 288, 192, 128, 64, 32)


def main() -> None:
    rep = E.calibration_report(E.PRESETS["7b-class"])
    text = rep["text_tokens"]
    print(f"7b-class calibration: text_tokens={text}, FLOPs cut at 64 tokens "
          f"{rep['flops_reduction_64']:.1%}, KV cut {rep['kv_reduction_64']:.2%}\n")
    for name, arch in sorted(E.PRESETS.items()):
        rows = E.sweep_tokens(arch, RETAINED, 576, text, 2)
        full = max(rows, key=lambda r: r.tokens)
        print(name)
        print(f"{'tokens':>8}{'TFLOPs':>10}{'KV MB':>10}{'FLOPs cut':>11}")
        for r in sorted(rows, key=lambda r: -r.tokens):
            print(f"{r.tokens:>8d}{r.flops / 1e12:>10.3f}{r.kv_bytes / 1e6:>10.1f}"
                  f"{E.reduction(full.flops, r.flops):>11.1%}")
        print()


if __name__ == "__main__":
    main()
