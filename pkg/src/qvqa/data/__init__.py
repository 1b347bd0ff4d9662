from .dataset import Sample, corpus_vocab, make_sample, make_samples, read_dataset, split_samples, write_dataset
from .reports import GRANULARITIES, QAPair, derive_qa, mask_numbers, mentions_nodule, parse_report, render_report
from .vocab import CLS, EOS, PAD, SEP, SIZE, SPECIALS, Vocabulary, build_vocab
from .world import QUADRANTS, Scene, generate_world, quadrant_means, render_images
