"""
Zero-shot, plain soft prompts, and reparameterized prompts
==========================================================

A synthetic task is built around a hidden "oracle" prompt: every class
prototype is what the frozen text encoder produces for that prompt followed by
the class name, and image features are noisy copies of the prototypes. The
hand-written template "a photo of a" is therefore a decent but imperfect
starting point, and learning the context vectors should close part of the gap.
"""

import warnings

from prelab.prompt_encoder import EncoderConfig, PromptEncoder, init_prompts
from prelab.synthetic import SyntheticTaskSpec, generate_synthetic_task
from prelab.train import TrainConfig, evaluate_base_to_new, train_prompts

warnings.simplefilter("ignore")

synth = generate_synthetic_task(SyntheticTaskSpec(C=10, d=32, K=16, noise_sigma=0.1))
task, backbone = synth.task, synth.backbone
print("classes:", task.class_names)
print("base:", [task.class_names[c] for c in task.base], "new:", [task.class_names[c] for c in task.new])

# %%
# Zero-shot: the template prompt, untrained, no encoder.
template = init_prompts("template", 4, backbone.vocab)
zs = evaluate_base_to_new(template, PromptEncoder(EncoderConfig(architecture="none"), 32, 4), task, backbone)

# The oracle prompt is the ceiling: noise alone limits it.
oracle = evaluate_base_to_new(synth.oracle_prompt, None, task, backbone)


def row(label, m):
    print(f"{label:28s} base {m.base_acc:6.2f}  new {m.new_acc:6.2f}  H {m.h_mean:6.2f}")


row("zero-shot template", zs)
row("hidden oracle prompt", oracle)

# %%
# Plain soft prompts (architecture "none") against the BiLSTM reparameterization.
# Both start from the template and train on 16 shots of the base classes only.
for arch in ("none", "bilstm", "mlp", "transformer"):
    cfg = TrainConfig(encoder=EncoderConfig(architecture=arch))
    prompt, encoder, hist = train_prompts(task, cfg, backbone)
    m = evaluate_base_to_new(prompt, encoder, task, backbone, history=hist)
    row(f"{arch} (loss {hist.loss_history[0]:.3f}->{hist.final_loss:.3f})", m)
