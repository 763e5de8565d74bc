# cch/__init__.py
"""
Compositional cross-modal human renderer.

Modules, bottom-up:
    diff_engine    float64 torch autograd helpers and finite-difference gradcheck
    body_model     rig, forward kinematics, blend shapes, (inverse) skinning, boxes
    ray_geometry   cameras, rays, ray-box / ray-capsule hits, stratified sampling
    fashion_text   vocabulary, word embeddings, cross attention
    part_nets      per-part SIREN fields, SDF density, multi-part mixture
    renderer       volume quadrature, the generator module, image assembly
    discriminator  fashion map, conditional critic, all losses
    dataset        attribute grammar, capsule rasterizer, toy records
    checkpoint     binary checkpoint container
    config         JSON run configuration
    trainer        training loop, PSNR, controllability probe
    checks         gradient checks of the trainable paths
"""
