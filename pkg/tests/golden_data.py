"""Frozen golden values computed once by an independent scratch script.

Each entry is (name, hypothesis text, reference text, expected score). The
two analytic anchors are exp(-0.25) = 0.7788007830714049 for the brevity
penalty case and 6/7 = 0.8571428571428571 for the dropped-token LCS case.
"""

GOLDEN_BLEU4 = [
    ("identical5", "a b c d e", "a b c d e", 1.0),
    ("bp_case", "a b c d", "a b c d e", 0.7788007830714049),
    ("no_overlap", "x y z w", "a b c d", 4.5180100180492235e-10),
    ("longer_hyp", "a b c d e f", "a b c d", 0.5081327481546147),
    ("repeat_clip", "the the the the", "the cat sat on the mat", 5.7950534707339523e-08),
    ("partial", "the cat sat on a mat", "the cat sat on the mat", 0.537284965911771),
    ("short_hyp3", "a b c", "a b c d e", 0.0028871566309219905),
    ("single_token", "a", "a", 1.0),
    ("swapped", "c d a b", "a b c d", 2.4028114141347565e-05),
    ("half_match", "a b x y", "a b c d", 1.6990442448471224e-05),
    ("report_like",
     "there is effusion in the left zone . no edema is seen .",
     "there is effusion in the left zone . possible edema is noted .",
     0.6262844962765468),
    ("empty_hyp", "", "a b", 0.0),
    ("identical2", "a b", "a b", 1.0),
    ("short_pair_mismatch", "a b", "a c", 2.2360679774997925e-05),
]

GOLDEN_ROUGE_L = [
    ("identical", "a b c d", "a b c d", 1.0),
    ("drop_one", "a c d", "a b c d", 0.8571428571428571),
    ("reversed", "d c b a", "a b c d", 0.25),
    ("no_overlap", "x y z", "a b c", 0.0),
    ("subseq", "a b", "a x b y", 0.6666666666666666),
    ("longer_hyp", "a x b y c z", "a b c", 0.6666666666666666),
    ("repeat", "a a b", "a b a b", 0.8571428571428571),
    ("single", "a", "a b c", 0.5),
    ("interleave", "a b c x y", "x a y b z c", 0.5454545454545454),
    ("report_like",
     "there is effusion . no edema is seen .",
     "there is effusion in the left zone . no edema is seen .",
     0.8181818181818181),
    ("empty_ref", "a b", "", 0.0),
]
