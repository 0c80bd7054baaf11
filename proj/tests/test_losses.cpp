#include <catch2/catch_amalgamated.hpp>

#include "ddlab/losses.hpp"
#include "ddlab/trainer.hpp"
#include "testutil.hpp"

using namespace ddlab;

namespace {

double consistency_value(const std::vector<double>& z1, const std::vector<double>& z2, double T) {
    Tape t;
    NodeId a = t.leaf(Tensor({z1.size()}, z1));
    NodeId b = t.leaf(Tensor({z2.size()}, z2));
    return t.value(consistency_loss(t, a, b, T)).item();
}

// Small training setup shared by the composite-loss tests.
struct Fixture {
    DomainDataset dataset;
    Backbone backbone;
    DomainDiscriminator disc;
    std::vector<const DomainSample*> batch;

    Fixture() {
        DatasetSpec spec;
        spec.num_domains = 3;
        spec.num_classes = 2;
        spec.channels = 1;
        spec.height = spec.width = 6;
        spec.samples_per_domain_per_class = 2;
        spec.shift_strength = 1.0;
        spec.seed = 5;
        dataset = generate(spec);

        BackboneConfig bc;
        bc.input_channels = 1;
        bc.input_height = bc.input_width = 6;
        bc.blocks = {{BlockKind::Conv, 4, 3}, {BlockKind::Conv, 4, 3}};
        bc.num_classes = 2;
        backbone = init_params(bc, 3);

        Rng rng(9);
        disc = init_discriminator(1, 3, 4, rng);

        for (std::size_t i = 0; i < 4; ++i) batch.push_back(&dataset.samples[i * 3 + 1]);
    }
};

}  // namespace

TEST_CASE("consistency_loss identities") {
    CHECK(consistency_value({1.0, -2.0, 0.5}, {1.0, -2.0, 0.5}, 5.0) == Catch::Approx(0.0).margin(1e-15));

    const double ab = consistency_value({1, 0}, {0, 1}, 5.0);
    const double ba = consistency_value({0, 1}, {1, 0}, 5.0);
    CHECK(ab == ba);  // exact symmetry by construction
    CHECK(ab > 0.0);

    // hand-evaluated scalar formula for z1=[1,0], z2=[0,1], T=5
    auto soft = [](double a, double b, double T) {
        const double ea = std::exp(a / T), eb = std::exp(b / T);
        return std::pair{ea / (ea + eb), eb / (ea + eb)};
    };
    auto [p1, p2] = soft(1, 0, 5);
    auto [q1, q2] = soft(0, 1, 5);
    const double kl_pq = p1 * std::log(p1 / q1) + p2 * std::log(p2 / q2);
    const double kl_qp = q1 * std::log(q1 / p1) + q2 * std::log(q2 / p2);
    CHECK(ab == Catch::Approx(0.5 * (kl_pq + kl_qp)).margin(1e-12));

    Tape t;
    NodeId a = t.leaf(Tensor({2}, {1, 0}));
    NodeId b = t.leaf(Tensor({3}, {1, 0, 0}));
    CHECK_THROWS_AS(consistency_loss(t, a, b, 5.0), DimensionError);
}

TEST_CASE("consistency_loss is nonnegative and symmetric on random logits") {
    Rng rng(12);
    for (int rep = 0; rep < 100; ++rep) {
        std::vector<double> z1(4), z2(4);
        for (auto& v : z1) v = rng.uniform(-10, 10);
        for (auto& v : z2) v = rng.uniform(-10, 10);
        const double ab = consistency_value(z1, z2, 5.0);
        CHECK(ab >= 0.0);
        CHECK(ab == consistency_value(z2, z1, 5.0));
    }
}

TEST_CASE("total_loss with dropout off reduces to cross-entropy plus domain term") {
    Fixture fx;
    DropConfig drop;
    drop.p_active = 0.0;
    LossWeights weights;
    weights.consistency = 0.0;

    Rng mask_rng(1);
    Tape t;
    BackboneNodes bbn = register_backbone(t, fx.backbone);
    DiscriminatorNodes dn = register_discriminator(t, fx.disc);
    BatchLossResult r = total_loss(t, fx.backbone, bbn, &fx.disc, &dn, fx.batch, 1, drop, weights,
                                   /*consistency=*/false, 3, mask_rng);

    // plain cross-entropy term computed independently
    std::vector<NodeId> ces;
    Tape t2;
    BackboneNodes bbn2 = register_backbone(t2, fx.backbone);
    for (const DomainSample* s : fx.batch) {
        ForwardResult fr = forward(t2, fx.backbone, bbn2, s->features);
        ces.push_back(t2.cross_entropy(fr.logits, s->class_label));
    }
    const double plain_ce = t2.value(t2.mean_scalars(ces)).item();
    CHECK(r.cls == Catch::Approx(plain_ce).margin(1e-12));
    CHECK(r.cons == 0.0);
    CHECK(r.domain > 0.0);
    CHECK(t.value(r.total).item() == Catch::Approx(r.cls + r.domain).margin(1e-12));
}

TEST_CASE("forced-equal masks give exactly zero consistency loss") {
    Fixture fx;
    DropConfig drop;
    LossWeights weights;
    Rng mask_rng(1);

    std::vector<FrozenMasks> frozen;
    Rng wrs_rng(77);
    for (std::size_t i = 0; i < fx.batch.size(); ++i) {
        DropMask m = wrs_mask({1, 2, 3, 4}, 1, wrs_rng);
        frozen.push_back(FrozenMasks{{m, m}});
    }
    Tape t;
    BackboneNodes bbn = register_backbone(t, fx.backbone);
    DiscriminatorNodes dn = register_discriminator(t, fx.disc);
    BatchLossResult r = total_loss(t, fx.backbone, bbn, &fx.disc, &dn, fx.batch, 1, drop, weights,
                                   /*consistency=*/true, 3, mask_rng, &frozen);
    CHECK(r.cons == 0.0);
}

TEST_CASE("total_loss equals the sum of independently computed terms") {
    Fixture fx;
    DropConfig drop;
    LossWeights weights;

    std::vector<FrozenMasks> frozen;
    Rng wrs_rng(31);
    for (std::size_t i = 0; i < fx.batch.size(); ++i) {
        FrozenMasks fm;
        fm.mask[0] = wrs_mask({1, 2, 3, 4}, 1, wrs_rng);
        fm.mask[1] = wrs_mask({4, 3, 2, 1}, 1, wrs_rng);
        frozen.push_back(fm);
    }

    Rng mask_rng(1);
    Tape t;
    BackboneNodes bbn = register_backbone(t, fx.backbone);
    DiscriminatorNodes dn = register_discriminator(t, fx.disc);
    BatchLossResult r = total_loss(t, fx.backbone, bbn, &fx.disc, &dn, fx.batch, 1, drop, weights,
                                   true, 3, mask_rng, &frozen);

    // recompose each term independently
    Tape t2;
    BackboneNodes bbn2 = register_backbone(t2, fx.backbone);
    DiscriminatorNodes dn2 = register_discriminator(t2, fx.disc);
    std::vector<NodeId> cls_terms, cons_terms, dom_logits;
    std::vector<std::size_t> dom_labels;
    for (std::size_t i = 0; i < fx.batch.size(); ++i) {
        const DomainSample& s = *fx.batch[i];
        NodeId captured = -1;
        auto pass = [&](const DropMask& m, bool with_domain) {
            ForwardHook hook;
            hook.layer = 1;
            hook.transform = [&](Tape& tp, NodeId f) {
                if (with_domain) captured = discriminate(tp, dn2, f, weights.grl_lambda);
                return m.dropped > 0 ? apply_mask(tp, f, m, drop.rescale) : f;
            };
            return forward(t2, fx.backbone, bbn2, s.features, hook).logits;
        };
        NodeId z1 = pass(frozen[i].mask[0], true);
        NodeId z2 = pass(frozen[i].mask[1], false);
        cls_terms.push_back(t2.scale(
            t2.add(t2.cross_entropy(z1, s.class_label), t2.cross_entropy(z2, s.class_label)), 0.5));
        cons_terms.push_back(consistency_loss(t2, z1, z2, weights.temperature));
        dom_logits.push_back(captured);
        dom_labels.push_back(s.domain_label);
    }
    const double cls = t2.value(t2.mean_scalars(cls_terms)).item();
    const double cons = t2.value(t2.mean_scalars(cons_terms)).item();
    const double dom = t2.value(domain_loss(t2, dom_logits, dom_labels, 3)).item();

    CHECK(r.cls == Catch::Approx(cls).margin(1e-12));
    CHECK(r.cons == Catch::Approx(cons).margin(1e-12));
    CHECK(r.domain == Catch::Approx(dom).margin(1e-12));
    CHECK(t.value(r.total).item() ==
          Catch::Approx(cls + weights.consistency * cons + dom).margin(1e-12));
}

TEST_CASE("composite loss gradients match finite differences with frozen masks") {
    Fixture fx;
    DropConfig drop;
    LossWeights weights;

    std::vector<FrozenMasks> frozen;
    Rng wrs_rng(55);
    for (std::size_t i = 0; i < fx.batch.size(); ++i) {
        FrozenMasks fm;
        fm.mask[0] = wrs_mask({1, 2, 3, 4}, 1, wrs_rng);
        fm.mask[1] = wrs_mask({4, 3, 2, 1}, 1, wrs_rng);
        frozen.push_back(fm);
    }

    // The GRL makes the backbone descend cls + w*cons - lambda*domain
    // rather than the raw total, so the finite-difference oracle for
    // backbone parameters uses that adjusted objective. Discriminator
    // parameters sit downstream of the GRL and see the raw total.
    auto eval_terms = [&](const Backbone& bb, const DomainDiscriminator& disc) {
        Rng mask_rng(1);
        Tape t;
        BackboneNodes bbn = register_backbone(t, bb);
        DiscriminatorNodes dn = register_discriminator(t, disc);
        BatchLossResult r = total_loss(t, bb, bbn, &disc, &dn, fx.batch, 1, drop, weights, true, 3,
                                       mask_rng, &frozen);
        return r;
    };

    // analytic gradients
    Rng mask_rng(1);
    Tape t;
    BackboneNodes bbn = register_backbone(t, fx.backbone);
    DiscriminatorNodes dn = register_discriminator(t, fx.disc);
    BatchLossResult r = total_loss(t, fx.backbone, bbn, &fx.disc, &dn, fx.batch, 1, drop, weights,
                                   true, 3, mask_rng, &frozen);
    t.backward(r.total);

    // finite differences on every backbone parameter and the discriminator
    Backbone bb = fx.backbone;
    DomainDiscriminator disc = fx.disc;
    auto backbone_objective = [&]() {
        BatchLossResult r = eval_terms(bb, disc);
        return r.cls + weights.consistency * r.cons - weights.grl_lambda * r.domain;
    };
    auto raw_total = [&]() {
        Rng mask_rng(1);
        Tape tt;
        BackboneNodes bbn2 = register_backbone(tt, bb);
        DiscriminatorNodes dn2 = register_discriminator(tt, disc);
        BatchLossResult r = total_loss(tt, bb, bbn2, &disc, &dn2, fx.batch, 1, drop, weights, true,
                                       3, mask_rng, &frozen);
        return tt.value(r.total).item();
    };

    struct Probe {
        std::string name;
        NodeId node;
        Tensor* tensor;
        bool backbone_side;
    };
    std::vector<Probe> probes = {{"conv1", bbn.block_w[0], &bb.block_w[0], true},
                                 {"conv2", bbn.block_w[1], &bb.block_w[1], true},
                                 {"fc_w", bbn.fc_w, &bb.fc_w, true},
                                 {"fc_b", bbn.fc_b, &bb.fc_b, true},
                                 {"disc_w", dn.w, &disc.w, false},
                                 {"disc_b", dn.b, &disc.b, false}};
    const double step = 1e-5;
    for (const Probe& probe : probes) {
        Tensor fd(probe.tensor->shape);
        for (std::size_t i = 0; i < probe.tensor->size(); ++i) {
            const double orig = probe.tensor->data[i];
            probe.tensor->data[i] = orig + step;
            const double plus = probe.backbone_side ? backbone_objective() : raw_total();
            probe.tensor->data[i] = orig - step;
            const double minus = probe.backbone_side ? backbone_objective() : raw_total();
            probe.tensor->data[i] = orig;
            fd.data[i] = (plus - minus) / (2 * step);
        }
        INFO(probe.name);
        CHECK(ddtest::max_rel_err(t.grad(probe.node), fd) < 1e-3);
    }
}

TEST_CASE("training loss decreases over the first SGD steps") {
    Fixture fx;
    Backbone bb = fx.backbone;
    SgdConfig opt{0.05, 0.9, 0.0};
    SgdState st;
    double prev = 1e300;
    for (int step = 0; step < 5; ++step) {
        Tape t;
        BackboneNodes bbn = register_backbone(t, bb);
        std::vector<NodeId> ces;
        for (const DomainSample* s : fx.batch)
            ces.push_back(t.cross_entropy(forward(t, bb, bbn, s->features).logits, s->class_label));
        NodeId loss = t.mean_scalars(ces);
        const double v = t.value(loss).item();
        CHECK(v < prev);
        prev = v;
        t.backward(loss);
        std::vector<Tensor*> params = bb.parameters();
        std::vector<const Tensor*> grads;
        for (std::size_t i = 0; i < bbn.block_w.size(); ++i) grads.push_back(&t.grad(bbn.block_w[i]));
        grads.push_back(&t.grad(bbn.fc_w));
        grads.push_back(&t.grad(bbn.fc_b));
        sgd_step(params, grads, st, opt, opt.lr);
    }
}
