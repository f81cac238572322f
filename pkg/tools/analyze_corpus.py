#!/usr/bin/env python3

import argparse
import os
import sys
from collections import Counter

sys.path.append(os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))

from toxic_spans import DEFAULT_MAX_LEN
from toxic_spans.cli import load_posts
from toxic_spans.evaluation import label_round_trip


def analyze_posts(posts, max_len=DEFAULT_MAX_LEN):
    """Token-length statistics and the token labeling round-trip score."""
    lengths = [len(p.tokens) for p in posts]
    if not lengths:
        return None

    stats = {
        'total_posts': len(posts),
        'min_length': min(lengths),
        'max_length': max(lengths),
        'avg_length': sum(lengths) / len(lengths),
        'median_length': sorted(lengths)[len(lengths) // 2],
        'truncated': sum(1 for length in lengths if length > max_len),
    }

    toxic_words = Counter(t.clean for p in posts for t in p.tokens if t.toxic)

    # Longest posts by token count
    longest = sorted([(p.id, len(p.tokens)) for p in posts], key=lambda x: x[1], reverse=True)[:10]

    labeled = [p for p in posts if p.post.labeled]
    round_trip = label_round_trip(labeled) if labeled else None

    return {
        'stats': stats,
        'toxic_words': toxic_words.most_common(10),
        'longest_posts': longest,
        'round_trip': round_trip,
        'all_lengths': lengths,
    }


def histogram(lengths, bins=20, width=50):
    """ASCII histogram lines of token lengths."""
    bin_size = max(max(lengths) // bins, 1)
    counts = [0] * (bins + 1)
    for length in lengths:
        counts[min(length // bin_size, bins)] += 1

    max_count = max(counts)
    lines = []
    for i, count in enumerate(counts):
        range_str = f"{i * bin_size}+" if i == bins else f"{i * bin_size}-{(i + 1) * bin_size}"
        bar = '#' * (int(count / max_count * width) if max_count else 0)
        lines.append(f"{range_str.ljust(12)} | {bar} {count}")
    return lines


def main():
    parser = argparse.ArgumentParser(description="Describe a toxic spans corpus")
    parser.add_argument("data", help="Toxic spans CSV or prepared .jsonl file")
    parser.add_argument("--max-len", type=int, default=DEFAULT_MAX_LEN,
                        help=f"Sequence length used for truncation counts (default: {DEFAULT_MAX_LEN})")
    parser.add_argument("--workers", type=int, default=1, help="Tokenization processes")
    args = parser.parse_args()

    posts = load_posts(args.data, workers=args.workers)
    analysis = analyze_posts(posts, args.max_len)
    if analysis is None:
        print(f"No posts in {args.data}")
        return

    stats = analysis['stats']
    print(f"Total posts: {stats['total_posts']}")
    print(f"Min tokens: {stats['min_length']}")
    print(f"Max tokens: {stats['max_length']}")
    print(f"Avg tokens: {stats['avg_length']:.2f}")
    print(f"Median tokens: {stats['median_length']}")
    print(f"Posts longer than {args.max_len}: {stats['truncated']}")

    if analysis['round_trip'] is not None:
        report = analysis['round_trip']
        print(f"\nGold label round-trip F1: {report.mean_f1:.3f} over {report.num_posts} posts")

    print("\n10 most frequent toxic words:")
    for i, (word, count) in enumerate(analysis['toxic_words'], 1):
        print(f"{i}. {word}: {count}")

    print("\n10 longest posts:")
    for i, (post_id, length) in enumerate(analysis['longest_posts'], 1):
        print(f"{i}. Post {post_id}: {length} tokens")

    print("\nASCII Histogram of token lengths:")
    for line in histogram(analysis['all_lengths']):
        print(line)


if __name__ == "__main__":
    main()
