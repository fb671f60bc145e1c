"""Regenerates tests/metrics_cases.hpp from scikit-learn's f1_score.

Run from the repo root: python3 tests/oracles/metrics_oracle.py > tests/metrics_cases.hpp
"""
import random

from sklearn.metrics import f1_score, confusion_matrix


def pairs_from_matrix(m):
    labels, preds = [], []
    for t, row in enumerate(m):
        for p, count in enumerate(row):
            labels += [t] * count
            preds += [p] * count
    return preds, labels


def cpp_ints(xs):
    return "{" + ", ".join(str(x) for x in xs) + "}"


def main():
    rng = random.Random(20240611)
    cases = []
    toy = [[5, 1, 0], [2, 3, 0], [0, 0, 4]]
    p, l = pairs_from_matrix(toy)
    cases.append(("toy3", 3, p, l))
    for k in range(25):
        n = rng.randint(5, 60)
        skew = rng.random()
        labels = [rng.randrange(5) for _ in range(n)]
        preds = [t if rng.random() < skew else rng.randrange(5) for t in labels]
        cases.append((f"random{k:02d}", 5, preds, labels))

    print("#pragma once")
    print("// Generated by tests/oracles/metrics_oracle.py (scikit-learn f1_score,")
    print("// average='weighted', zero_division=0). Do not edit by hand.")
    print()
    print("#include <vector>")
    print()
    print("struct MetricsCase {")
    print("  const char* name;")
    print("  int classes;")
    print("  std::vector<int> preds;")
    print("  std::vector<int> labels;")
    print("  double weighted_f1;")
    print("  std::vector<double> per_class;")
    print("};")
    print()
    print("inline const std::vector<MetricsCase>& metrics_cases() {")
    print("  static const std::vector<MetricsCase> cases = {")
    for name, classes, preds, labels in cases:
        ks = list(range(classes))
        w = f1_score(labels, preds, labels=ks, average="weighted", zero_division=0)
        per = f1_score(labels, preds, labels=ks, average=None, zero_division=0)
        assert confusion_matrix(labels, preds, labels=ks).sum() == len(labels)
        print(f'      {{"{name}", {classes}, {cpp_ints(preds)},')
        print(f"       {cpp_ints(labels)},")
        print(f"       {float(w)!r}, {{{', '.join(repr(float(x)) for x in per)}}}}},")
    print("  };")
    print("  return cases;")
    print("}")


if __name__ == "__main__":
    main()
